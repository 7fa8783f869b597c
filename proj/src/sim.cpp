#include "g2kit/sim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace g2kit::sim {

namespace {

constexpr double kSPerNs = 1e-9;

std::uint64_t to_ticks(double t_ns, double resolution_ns) {
  return static_cast<std::uint64_t>(t_ns / resolution_ns);
}

/// Round a ns quantity to an integer number of base units, rejecting
/// misaligned values.
std::int64_t aligned_ticks(double value_ns, double unit_ns, const char* what) {
  const double q = value_ns / unit_ns;
  const double r = std::nearbyint(q);
  if (std::fabs(q - r) > 1e-6 * std::max(1.0, std::fabs(q)))
    throw ValidationError(std::string(what) +
                          " must be an integer multiple of its base unit");
  return static_cast<std::int64_t>(r);
}

}  // namespace

void SimConfig::validate() const {
  rates.validate();
  eta.validate();
  if (!(duration_s > 0.0) || !std::isfinite(duration_s))
    throw ValidationError("duration must be > 0");
  if (!(beamsplit_ratio > 0.0 && beamsplit_ratio < 1.0))
    throw ValidationError("beamsplit_ratio must lie in (0, 1)");
  if (!(timestamp_resolution_ns > 0.0))
    throw ValidationError("timestamp_resolution must be > 0");
  if (background_rate_per_s < 0.0 || dark_rate_per_s < 0.0)
    throw ValidationError("background and dark rates must be >= 0");
  if (dead_time_ns < 0.0) throw ValidationError("dead time must be >= 0");
}

double SimConfig::expected_signal_rate_per_s() const {
  return kinetics::count_rate(rates, eta);
}

double SimConfig::expected_event_count() const {
  const double uncorrelated =
      2.0 * (background_rate_per_s + dark_rate_per_s) * duration_s;
  return expected_signal_rate_per_s() * duration_s + uncorrelated;
}

EventStream::EventStream(const SimConfig& config)
    : config_(config),
      emitter_rng_(SplitRng::mix(config.rng_seed, 1)),
      bg_rng_{SplitRng(SplitRng::mix(config.rng_seed, 2)),
              SplitRng(SplitRng::mix(config.rng_seed, 3))} {
  config_.validate();
  duration_ns_ = config_.duration_s / kSPerNs;
  bg_rate_per_ns_ =
      (config_.background_rate_per_s + config_.dark_rate_per_s) * kSPerNs;
  const double exit2 = config_.rates.k21 + config_.rates.k23;
  p_shelve_ = (exit2 > 0.0) ? config_.rates.k23 / exit2 : 0.0;
  const double p_emit = 1.0 - p_shelve_;
  p_detect_a_ = p_shelve_ + p_emit * config_.eta.eta * config_.beamsplit_ratio;
  p_detect_b_ = p_shelve_ + p_emit * config_.eta.eta;
  last_detected_ns_[0] = last_detected_ns_[1] =
      -std::numeric_limits<double>::infinity();
  pending_[0] = next_emitter_event();
  refill_background(0);
  refill_background(1);
}

std::optional<DetectionEvent> EventStream::next_emitter_event() {
  const auto& k = config_.rates;
  while (true) {
    switch (level_) {
      case 1: {
        if (k.k12 <= 0.0) return std::nullopt;  // emitter off
        t_emitter_ns_ += emitter_rng_.exponential(k.k12);
        if (t_emitter_ns_ >= duration_ns_) return std::nullopt;
        level_ = 2;
        break;
      }
      case 2: {
        const double exit2 = k.k21 + k.k23;
        t_emitter_ns_ += emitter_rng_.exponential(exit2);
        if (t_emitter_ns_ >= duration_ns_) return std::nullopt;
        const double u = emitter_rng_.uniform();
        if (u < p_shelve_) {
          level_ = 3;
          break;
        }
        level_ = 1;  // photon emitted on 2 -> 1
        if (u < p_detect_b_) {
          const int det = (u < p_detect_a_) ? 0 : 1;
          if (config_.dead_time_ns > 0.0 &&
              t_emitter_ns_ - last_detected_ns_[det] < config_.dead_time_ns)
            break;
          last_detected_ns_[det] = t_emitter_ns_;
          return DetectionEvent{
              to_ticks(t_emitter_ns_, config_.timestamp_resolution_ns),
              det == 0 ? Detector::A : Detector::B};
        }
        break;
      }
      default: {
        t_emitter_ns_ += emitter_rng_.exponential(k.k32);
        if (t_emitter_ns_ >= duration_ns_) return std::nullopt;
        level_ = 2;
        break;
      }
    }
  }
}

void EventStream::refill_background(int which) {
  if (bg_rate_per_ns_ <= 0.0) {
    pending_[1 + which] = std::nullopt;
    return;
  }
  t_bg_ns_[which] += bg_rng_[which].exponential(bg_rate_per_ns_);
  if (t_bg_ns_[which] >= duration_ns_) {
    pending_[1 + which] = std::nullopt;
    return;
  }
  pending_[1 + which] =
      DetectionEvent{to_ticks(t_bg_ns_[which], config_.timestamp_resolution_ns),
                     which == 0 ? Detector::A : Detector::B};
}

std::optional<DetectionEvent> EventStream::next() {
  int best = -1;
  for (int i = 0; i < 3; ++i) {
    if (!pending_[i]) continue;
    if (best < 0 || pending_[i]->ticks < pending_[best]->ticks) best = i;
  }
  if (best < 0) return std::nullopt;
  const DetectionEvent out = *pending_[best];
  if (best == 0)
    pending_[0] = next_emitter_event();
  else
    refill_background(best - 1);
  return out;
}

std::vector<DetectionEvent> simulate_events(const SimConfig& config) {
  config.validate();
  const double expected = config.expected_event_count();
  if (expected > static_cast<double>(config.max_events_in_memory))
    throw ValidationError(
        "expected event count exceeds max_events_in_memory; consume the "
        "stream incrementally via EventStream");
  std::vector<DetectionEvent> events;
  events.reserve(static_cast<std::size_t>(expected * 1.05) + 64);
  EventStream stream(config);
  while (auto e = stream.next()) events.push_back(*e);
  return events;
}

CoincidenceHistogram& CoincidenceHistogram::operator+=(
    const CoincidenceHistogram& other) {
  if (bin_width_ns != other.bin_width_ns || tau_min_ns != other.tau_min_ns ||
      tau_max_ns != other.tau_max_ns || mode != other.mode ||
      timestamp_resolution_ns != other.timestamp_resolution_ns)
    throw ValidationError("cannot merge histograms with different layouts");
  for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
  singles_a += other.singles_a;
  singles_b += other.singles_b;
  duration_s += other.duration_s;
  return *this;
}

Correlator::Correlator(double bin_width_ns, double tau_min_ns,
                       double tau_max_ns, CorrelationMode mode,
                       double timestamp_resolution_ns) {
  if (!(bin_width_ns > 0.0)) throw ValidationError("bin width must be > 0");
  if (!(tau_min_ns < tau_max_ns))
    throw ValidationError("correlation window must have tau_min < tau_max");
  if (!(timestamp_resolution_ns > 0.0))
    throw ValidationError("timestamp resolution must be > 0");
  bin_ticks_ = aligned_ticks(bin_width_ns, timestamp_resolution_ns,
                             "bin width (vs timestamp resolution)");
  if (bin_ticks_ <= 0) throw ValidationError("bin width below resolution");
  const std::int64_t nbins =
      aligned_ticks(tau_max_ns - tau_min_ns, bin_width_ns,
                    "correlation window (vs bin width)");
  tau_min_ticks_ = aligned_ticks(tau_min_ns, timestamp_resolution_ns,
                                 "tau_min (vs timestamp resolution)");
  tau_max_ticks_ = tau_min_ticks_ + nbins * bin_ticks_;
  hist_.bin_width_ns = bin_width_ns;
  hist_.tau_min_ns = tau_min_ns;
  hist_.tau_max_ns = tau_max_ns;
  hist_.timestamp_resolution_ns = timestamp_resolution_ns;
  hist_.mode = mode;
  hist_.counts.assign(static_cast<std::size_t>(nbins), 0);
}

void Correlator::set_anchor_window(std::uint64_t t0_ticks,
                                   std::uint64_t t1_ticks) {
  anchor_t0_ = t0_ticks;
  anchor_t1_ = t1_ticks;
}

void Correlator::bin_delay(std::int64_t delta_ticks) {
  if (delta_ticks < tau_min_ticks_ || delta_ticks >= tau_max_ticks_) return;
  const std::size_t bin =
      static_cast<std::size_t>((delta_ticks - tau_min_ticks_) / bin_ticks_);
  ++hist_.counts[bin];
}

void Correlator::add(const DetectionEvent& event) {
  if (have_last_ && event.ticks < last_ticks_)
    throw ValidationError("event stream is not sorted by timestamp");
  have_last_ = true;
  last_ticks_ = event.ticks;
  const std::int64_t t = static_cast<std::int64_t>(event.ticks);

  if (event.detector == Detector::A)
    ++hist_.singles_a;
  else
    ++hist_.singles_b;

  if (hist_.mode == CorrelationMode::start_stop) {
    if (event.detector == Detector::A) {
      if (in_anchor_window(event.ticks)) pending_starts_.push_back(event.ticks);
    } else {
      // this B is the first stop for every pending start
      for (std::uint64_t start : pending_starts_)
        bin_delay(t - static_cast<std::int64_t>(start));
      pending_starts_.clear();
    }
    return;
  }

  // full correlation: delays are tB - tA, attributed to the A event
  if (event.detector == Detector::A) {
    if (in_anchor_window(event.ticks)) {
      for (std::uint64_t tb : recent_b_)
        bin_delay(static_cast<std::int64_t>(tb) - t);
      recent_a_.push_back(event.ticks);
    }
  } else {
    for (std::uint64_t ta : recent_a_)
      bin_delay(t - static_cast<std::int64_t>(ta));
    recent_b_.push_back(event.ticks);
  }

  // evict partners that can no longer pair with future events
  while (!recent_a_.empty() &&
         t - static_cast<std::int64_t>(recent_a_.front()) >= tau_max_ticks_)
    recent_a_.pop_front();
  while (!recent_b_.empty() &&
         static_cast<std::int64_t>(recent_b_.front()) - t < tau_min_ticks_)
    recent_b_.pop_front();
}

CoincidenceHistogram Correlator::finish(double duration_s) {
  if (!(duration_s > 0.0)) throw ValidationError("duration must be > 0");
  hist_.duration_s = duration_s;
  return hist_;
}

CoincidenceHistogram correlate(std::span<const DetectionEvent> events,
                               double bin_width_ns, double tau_min_ns,
                               double tau_max_ns, CorrelationMode mode,
                               double timestamp_resolution_ns,
                               double duration_s) {
  Correlator corr(bin_width_ns, tau_min_ns, tau_max_ns, mode,
                  timestamp_resolution_ns);
  for (const DetectionEvent& e : events) corr.add(e);
  return corr.finish(duration_s);
}

void G2Curve::validate() const {
  if (tau_ns.size() != g2.size() || tau_ns.size() != sigma.size())
    throw ValidationError("curve arrays must have equal length");
  for (std::size_t i = 1; i < tau_ns.size(); ++i)
    if (!(tau_ns[i] > tau_ns[i - 1]))
      throw ValidationError("tau grid must be strictly increasing");
  if (!(rho > 0.0 && rho <= 1.0))
    throw ValidationError("rho must lie in (0, 1]");
}

G2Curve normalize(const CoincidenceHistogram& hist) {
  if (!(hist.duration_s > 0.0))
    throw ValidationError("histogram has zero duration");
  if (hist.singles_a == 0 || hist.singles_b == 0)
    throw ValidationError("histogram has zero singles on a detector");

  // expected Poissonian coincidences per bin at equivalent singles rates
  const double poisson_level = static_cast<double>(hist.singles_a) *
                               static_cast<double>(hist.singles_b) *
                               (hist.bin_width_ns * kSPerNs) / hist.duration_s;
  if (!(poisson_level > 0.0))
    throw ValidationError("histogram normalization is degenerate");

  const std::size_t n = hist.bin_count();
  G2Curve curve;
  curve.tau_ns.resize(n);
  curve.g2.resize(n);
  curve.sigma.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    curve.tau_ns[i] = hist.bin_center_ns(i);
    const double c = static_cast<double>(hist.counts[i]);
    curve.g2[i] = c / poisson_level;
    double err_counts = c;
    if (hist.counts[i] == 0) {
      // expected count from a +-5 bin moving average, floored at 1
      double sum = 0.0;
      int used = 0;
      const std::size_t lo = (i >= 5) ? i - 5 : 0;
      const std::size_t hi = std::min(n - 1, i + 5);
      for (std::size_t j = lo; j <= hi; ++j, ++used)
        sum += static_cast<double>(hist.counts[j]);
      err_counts = std::max(sum / std::max(used, 1), 1.0);
    }
    curve.sigma[i] = std::sqrt(err_counts) / poisson_level;
  }

  if (hist.mode == CorrelationMode::start_stop) {
    // first-stop depletion: probability of a stop within the window per
    // start; flag when the implied correction passes 1%
    const double rate_b =
        static_cast<double>(hist.singles_b) / hist.duration_s;
    const double span_s =
        (hist.tau_max_ns - std::max(hist.tau_min_ns, 0.0)) * kSPerNs;
    curve.start_stop_bias_warning = rate_b * span_s > 0.01;
  }
  return curve;
}

}  // namespace g2kit::sim
