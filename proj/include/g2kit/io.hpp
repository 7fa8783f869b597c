#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "g2kit/estimation.hpp"
#include "g2kit/kinetics.hpp"
#include "g2kit/sim.hpp"

#include <json.hpp>

namespace g2kit::io {

/// Event stream loaded from disk.
struct EventFile {
  std::vector<sim::DetectionEvent> events;
  double resolution_ns = 0.1;
  std::optional<double> duration_s;  ///< present in the binary format
};

/// CSV `t_ns,detector` with fixed-point timestamps; detector is A or B.
void write_events_csv(const std::filesystem::path& path,
                      const std::vector<sim::DetectionEvent>& events,
                      double resolution_ns);

/// Compact binary format: magic "G2EV", u32 version, f64 resolution_ns,
/// f64 duration_s header, then little-endian (u64 ticks, u8 detector)
/// records.
void write_events_binary(const std::filesystem::path& path,
                         const std::vector<sim::DetectionEvent>& events,
                         double resolution_ns, double duration_s);

/// Streaming binary writer (events in tick order, one pass).
class BinaryEventWriter {
 public:
  BinaryEventWriter(const std::filesystem::path& path, double resolution_ns,
                    double duration_s);
  ~BinaryEventWriter();
  void write(const sim::DetectionEvent& event);
  void close();

 private:
  struct Impl;
  Impl* impl_;
};

/// Auto-detects binary vs CSV by the magic bytes.
EventFile read_events(const std::filesystem::path& path,
                      double csv_resolution_ns = 0.1);

void write_histogram_csv(const std::filesystem::path& path,
                         const sim::CoincidenceHistogram& hist);

/// `tau_ns,g2,sigma` (+ optional `g2_fit` overlay column).
void write_curve_csv(const std::filesystem::path& path,
                     const sim::G2Curve& curve,
                     const std::vector<double>* fit_overlay = nullptr);

sim::G2Curve read_curve_csv(const std::filesystem::path& path);

/// `power_mW,counts_per_s`.
void write_saturation_csv(
    const std::filesystem::path& path,
    const std::vector<std::pair<double, double>>& data,
    const std::vector<double>* model_overlay = nullptr,
    const std::vector<double>* two_level_overlay = nullptr);

std::vector<std::pair<double, double>> read_saturation_csv(
    const std::filesystem::path& path);

// JSON representations; all numeric fields carry units in their names.
nlohmann::json to_json(const kinetics::RateConstants& rates);
kinetics::RateConstants rates_from_json(const nlohmann::json& j);
nlohmann::json to_json(const kinetics::DerivedParams& derived);
nlohmann::json to_json(const kinetics::PowerModel& model);
kinetics::PowerModel power_model_from_json(const nlohmann::json& j);
nlohmann::json to_json(const est::FitResult& fit);
nlohmann::json to_json(const est::EtaCalibration& cal);
nlohmann::json to_json(const est::PowerModelFit& fit);
nlohmann::json to_json(const est::SaturationFit& fit);

void write_json(const std::filesystem::path& path, const nlohmann::json& j);
nlohmann::json read_json(const std::filesystem::path& path);

/// FNV-1a hash of a canonical JSON dump, for provenance blocks.
std::string config_hash(const nlohmann::json& j);

}  // namespace g2kit::io
