// Presampled stochastic increments shared by all integrators.
//
// A NoisePath materializes every per-step, per-channel draw up front so the
// exact same realization can be replayed across solvers (pathwise comparisons
// require driving two schemes with the same increments).
#pragma once

#include "stochdil/common.hpp"
#include "stochdil/rng.hpp"

#include <cstdint>

namespace stochdil {

enum class NoiseLaw { rademacher, three_point, gaussian };

NoiseLaw noise_law_from_string(const std::string& name);
std::string to_string(NoiseLaw law);

// Columns index channels, rows index time steps.  xi2 is only sampled for
// the three_point and gaussian laws (it feeds the dt^{3/2} terms of the
// weak-2 scheme); for the rademacher law it is identically zero.
struct NoisePath {
  int steps = 0;
  int channels = 0;
  double dt = 0.0;
  NoiseLaw law = NoiseLaw::rademacher;
  uint64_t seed = 0;
  uint64_t stream = 0;

  RMatrix xi1;  // primary draws
  RMatrix xi2;  // secondary draws (weak-2 only)
  RMatrix dW;   // sqrt(dt) * xi1
  RMatrix dZ;   // dt^{3/2}/2 * (xi1 + xi2/sqrt(3))
  RMatrix I11;  // dt * (xi1^2 - 1) / 2
  RMatrix I10;  // dt * dW - dZ
  RMatrix xi3;  // xi1^2 - 1
};

// Draw order is fixed (step-major, channel-minor; xi1 then xi2) so a given
// (seed, stream) pair always reproduces bit-identical paths.
NoisePath presample(int steps, double dt, int channels, NoiseLaw law, uint64_t seed,
                    uint64_t stream = 0);

}  // namespace stochdil
