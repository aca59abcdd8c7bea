#include "llama/footprint.hpp"

#include <cmath>

#include "llama/errors.hpp"

namespace llama {

void FootprintInput::validate() const {
  if (!(gpu_hours > 0)) throw DomainError("gpu_hours must be positive");
  if (!(gpu_power_watts > 0)) throw DomainError("gpu_power_watts must be positive");
  if (!(pue > 0)) throw DomainError("pue must be positive");
  if (!(carbon_intensity > 0)) throw DomainError("carbon_intensity must be positive");
}

double energy_mwh(const FootprintInput& input) {
  input.validate();
  return input.gpu_hours * input.gpu_power_watts * input.pue / 1e6;
}

double carbon_tco2eq(double mwh, double intensity) {
  if (!(mwh >= 0)) throw DomainError("carbon_tco2eq: energy must be non-negative");
  if (!(intensity > 0)) throw DomainError("carbon_tco2eq: intensity must be positive");
  return mwh * intensity;
}

FootprintReport footprint(const FootprintInput& input) {
  FootprintReport r;
  r.mwh = energy_mwh(input);
  r.tco2eq = carbon_tco2eq(r.mwh, input.carbon_intensity);
  r.display_mwh = static_cast<std::int64_t>(std::floor(r.mwh));
  r.display_tco2eq = std::llround(r.tco2eq);
  return r;
}

const std::vector<PublishedFootprint>& published_footprints() {
  static const std::vector<PublishedFootprint> rows{
      {"OPT-175B", 809472, 400, 356, 137},  {"BLOOM-175B", 1082880, 400, 475, 183},
      {"LLaMA-7B", 82432, 400, 36, 14},     {"LLaMA-13B", 135168, 400, 59, 23},
      {"LLaMA-33B", 530432, 400, 233, 90},  {"LLaMA-65B", 1022362, 400, 449, 173},
  };
  return rows;
}

}  // namespace llama
