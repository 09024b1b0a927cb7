#pragma once

#include <span>
#include <string>
#include <vector>

namespace gocoma {

// A trainable tensor seen by the optimizer: its values and the gradient
// buffer backward passes accumulate into.
struct ParamView {
  std::string name;
  std::span<double> value;
  std::span<double> grad;
};

void zero_grads(const std::vector<ParamView>& params);
void scale_grads(const std::vector<ParamView>& params, double factor);
std::vector<double> snapshot(const std::vector<ParamView>& params);
void restore(const std::vector<ParamView>& params, const std::vector<double>& values);

}  // namespace gocoma
