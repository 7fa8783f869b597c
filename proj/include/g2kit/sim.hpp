#pragma once

#include <cstdint>
#include <deque>
#include <optional>
#include <span>
#include <vector>

#include "g2kit/kinetics.hpp"
#include "g2kit/rng.hpp"

namespace g2kit::sim {

enum class Detector : std::uint8_t { A = 0, B = 1 };

/// One detector click.  Timestamps are integer multiples of the stream's
/// timestamp resolution, which keeps histogramming exact and runs
/// byte-reproducible.
struct DetectionEvent {
  std::uint64_t ticks = 0;
  Detector detector = Detector::A;
};

/// Emitter + HBT bench configuration.
struct SimConfig {
  kinetics::RateConstants rates;
  kinetics::DetectionEfficiency eta;
  double duration_s = 1.0;
  double beamsplit_ratio = 0.5;        ///< P(photon routed to detector A)
  double background_rate_per_s = 0.0;  ///< uncorrelated clicks, per detector
  double dark_rate_per_s = 0.0;        ///< per detector
  double timestamp_resolution_ns = 0.1;
  std::uint64_t rng_seed = 0;
  double dead_time_ns = 0.0;  ///< per-detector dead time; 0 = ideal detectors
  std::size_t max_events_in_memory = 80'000'000;

  void validate() const;
  /// Expected detected rate per detector pair member is split from this
  /// total: eta * k21 * sigma2_inf (converted to counts/s).
  double expected_signal_rate_per_s() const;
  /// Expected total event count (signal + background + dark, both detectors).
  double expected_event_count() const;
};

/// Pull-based event source: exact-jump realization of the three-level
/// chain (exponential waiting time per occupied level, competing 2->1 and
/// 2->3 channels), eta-thinned emission, beamsplit routing, merged with
/// per-detector Poisson background/dark streams.  Events come out in
/// non-decreasing tick order; identical config (incl. seed) gives an
/// identical stream.
class EventStream {
 public:
  explicit EventStream(const SimConfig& config);

  /// Next event, or nullopt once the configured duration is exhausted.
  std::optional<DetectionEvent> next();

  const SimConfig& config() const { return config_; }

 private:
  std::optional<DetectionEvent> next_emitter_event();
  void refill_background(int which);

  SimConfig config_;
  SplitRng emitter_rng_;
  SplitRng bg_rng_[2];
  double duration_ns_ = 0.0;
  double t_emitter_ns_ = 0.0;
  double t_bg_ns_[2] = {0.0, 0.0};
  double bg_rate_per_ns_ = 0.0;
  int level_ = 1;
  // state-2 exit thresholds on a single uniform draw
  double p_shelve_ = 0.0;
  double p_detect_a_ = 0.0;
  double p_detect_b_ = 0.0;
  double last_detected_ns_[2];
  std::optional<DetectionEvent> pending_[3];  // emitter, bg A, bg B
  bool exhausted_[3] = {false, false, false};
};

/// Collect a full stream into memory.  Throws ValidationError when the
/// expected event count exceeds config.max_events_in_memory (stream with
/// EventStream::next instead).
std::vector<DetectionEvent> simulate_events(const SimConfig& config);

enum class CorrelationMode { full_correlation, start_stop };

/// Raw A-B delay histogram plus the bookkeeping needed to normalize it.
struct CoincidenceHistogram {
  double bin_width_ns = 1.0;
  double tau_min_ns = 0.0;
  double tau_max_ns = 0.0;
  double timestamp_resolution_ns = 0.1;
  CorrelationMode mode = CorrelationMode::full_correlation;
  std::vector<std::uint64_t> counts;
  std::uint64_t singles_a = 0;
  std::uint64_t singles_b = 0;
  double duration_s = 0.0;

  std::size_t bin_count() const { return counts.size(); }
  double bin_center_ns(std::size_t i) const {
    return tau_min_ns + (static_cast<double>(i) + 0.5) * bin_width_ns;
  }
  /// Merge a disjoint-slice partial histogram (same binning/mode required).
  CoincidenceHistogram& operator+=(const CoincidenceHistogram& other);
};

/// Streaming coincidence accumulator.
///
/// full_correlation: every (A, B) pair with delay tB - tA inside
/// [tau_min, tau_max) is binned.  start_stop: each A click starts an ideal
/// TAC that stops on the *next* B click (first-stop bias included by
/// construction), and the delay is binned if it falls in the window.
///
/// Pairs are attributed to their A (anchor) event; restricting the anchor
/// window makes partial histograms over disjoint time slices merge exactly
/// into the full histogram.
class Correlator {
 public:
  Correlator(double bin_width_ns, double tau_min_ns, double tau_max_ns,
             CorrelationMode mode, double timestamp_resolution_ns);

  /// Count pairs only when the anchor event lies in [t0_ticks, t1_ticks).
  void set_anchor_window(std::uint64_t t0_ticks, std::uint64_t t1_ticks);

  void add(const DetectionEvent& event);  ///< events must arrive sorted

  /// Finalize; duration is the acquisition wall time covered by the stream.
  CoincidenceHistogram finish(double duration_s);

 private:
  void bin_delay(std::int64_t delta_ticks);
  bool in_anchor_window(std::uint64_t ticks) const {
    return ticks >= anchor_t0_ && ticks < anchor_t1_;
  }

  CoincidenceHistogram hist_;
  std::int64_t tau_min_ticks_ = 0;
  std::int64_t tau_max_ticks_ = 0;
  std::int64_t bin_ticks_ = 1;
  std::uint64_t anchor_t0_ = 0;
  std::uint64_t anchor_t1_ = UINT64_MAX;
  std::deque<std::uint64_t> recent_a_;  // anchors awaiting future B partners
  std::deque<std::uint64_t> recent_b_;
  std::deque<std::uint64_t> pending_starts_;  // start_stop mode
  bool have_last_ = false;
  std::uint64_t last_ticks_ = 0;
};

/// One-shot correlation of an in-memory stream.
CoincidenceHistogram correlate(std::span<const DetectionEvent> events,
                               double bin_width_ns, double tau_min_ns,
                               double tau_max_ns, CorrelationMode mode,
                               double timestamp_resolution_ns,
                               double duration_s);

/// Normalized g2 estimate with per-bin standard errors.
struct G2Curve {
  std::vector<double> tau_ns;  ///< bin centers, strictly increasing
  std::vector<double> g2;
  std::vector<double> sigma;
  double rho = 1.0;  ///< signal fraction the values correspond to
  /// Set when start_stop depletion exceeds 1% over the window and the
  /// Poissonian normalization is no longer trustworthy.
  bool start_stop_bias_warning = false;

  void validate() const;
};

/// Divide each bin by the Poissonian coincidence expectation
/// singles_a * singles_b * bin_width / duration.  Standard error per bin is
/// value/sqrt(count); zero-count bins get the error implied by a +-5-bin
/// moving-average expected count, floored at one raw count.
G2Curve normalize(const CoincidenceHistogram& hist);

}  // namespace g2kit::sim
