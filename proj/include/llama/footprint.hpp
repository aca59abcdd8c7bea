#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace llama {

struct FootprintInput {
  double gpu_hours = 0.0;
  double gpu_power_watts = 400.0;
  double pue = 1.1;
  double carbon_intensity = 0.385;  // kgCO2e per kWh, i.e. t per MWh

  /// Throws DomainError unless every field is strictly positive.
  void validate() const;
};

/// GPU-h × watts × PUE, in MWh.
double energy_mwh(const FootprintInput& input);

/// mwh × intensity, in tCO2eq.
double carbon_tco2eq(double mwh, double intensity = 0.385);

struct FootprintReport {
  double mwh;
  double tco2eq;
  std::int64_t display_mwh;     // whole MWh, truncated
  std::int64_t display_tco2eq;  // whole tonnes, nearest, from the unrounded energy
};

FootprintReport footprint(const FootprintInput& input);

struct PublishedFootprint {
  std::string model;
  double gpu_hours;
  double gpu_power_watts;
  std::int64_t mwh;
  std::int64_t tco2eq;
};

/// Published training-footprint rows (400 W A100-80GB, PUE 1.1, US-average grid).
const std::vector<PublishedFootprint>& published_footprints();

}  // namespace llama
