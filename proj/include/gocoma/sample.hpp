#pragma once

#include <string>
#include <vector>

#include "gocoma/tensor.hpp"

namespace gocoma {

// One paired example: T_c code tokens and T_v image tokens.
struct Sample {
  std::string id;
  int label = 0;
  std::vector<Vec> code;
  std::vector<Vec> image;
};

}  // namespace gocoma
