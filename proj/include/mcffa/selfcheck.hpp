#pragma once

// Finite-difference self-check over every layer type and the micro model.
// The float analytic gradient of each layer is compared with a central
// difference of a double mirror holding identical values.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace mcffa {

inline constexpr double kGradTolerance = 1e-3;

struct LayerReport {
  std::string layer;
  std::size_t seeds = 0;
  std::size_t elements = 0;  // gradient elements compared
  double max_relative_error = 0;
  std::string worst_input;   // e.g. "weight" or a parameter name
  bool passed = false;
};

// Registered layer names in report order.
std::vector<std::string> gradcheck_layers();

// Checks one layer over seeds 0..seeds-1. With `fault` set, the layer's
// backward pass is scaled by 1.5, so the check must fail.
LayerReport check_layer(const std::string& layer, std::size_t seeds = 5, bool fault = false,
                        double tolerance = kGradTolerance);

// Every registered layer once; `fault_layer` names a layer to corrupt.
std::vector<LayerReport> run_gradcheck(std::size_t seeds = 5, const std::string& fault_layer = {},
                                       double tolerance = kGradTolerance);

}  // namespace mcffa
