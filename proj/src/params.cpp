#include "gocoma/params.hpp"

#include <algorithm>

#include "gocoma/errors.hpp"

namespace gocoma {

void zero_grads(const std::vector<ParamView>& params) {
  for (const auto& p : params) std::fill(p.grad.begin(), p.grad.end(), 0.0);
}

void scale_grads(const std::vector<ParamView>& params, double factor) {
  for (const auto& p : params)
    for (double& g : p.grad) g *= factor;
}

std::vector<double> snapshot(const std::vector<ParamView>& params) {
  std::vector<double> out;
  for (const auto& p : params) out.insert(out.end(), p.value.begin(), p.value.end());
  return out;
}

void restore(const std::vector<ParamView>& params, const std::vector<double>& values) {
  std::size_t at = 0;
  for (const auto& p : params) {
    if (at + p.value.size() > values.size()) throw InvalidInput("restore: snapshot too short");
    std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(at), p.value.size(), p.value.begin());
    at += p.value.size();
  }
  if (at != values.size()) throw InvalidInput("restore: snapshot size mismatch");
}

}  // namespace gocoma
