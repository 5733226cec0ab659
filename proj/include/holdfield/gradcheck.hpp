#pragma once

#include <functional>
#include <string>
#include <vector>

namespace holdfield {

// One registered differentiable operation: run() returns the largest relative
// error between the engine gradient and central finite differences on a
// fixed randomized probe.
struct GradCheckEntry {
  std::string name;
  double tolerance = 1e-4;
  std::function<double()> run;
};

// The full registry: field evaluations, density, compositing, the five
// training losses and the three refinement energies.
const std::vector<GradCheckEntry>& gradient_check_registry();

}  // namespace holdfield
