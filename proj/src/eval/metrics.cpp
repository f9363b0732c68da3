#include "evmap/eval/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace evmap::eval {

ErrorCurve error_curve(const model::PredictionTrace& trace, double scale, double y_gt, double t_c_ms) {
  if (!(y_gt > 0)) throw std::invalid_argument("error_curve: y_gt must be positive, got " + std::to_string(y_gt));
  if (!(t_c_ms > 0)) throw std::invalid_argument("error_curve: T_c must be positive, got " + std::to_string(t_c_ms));
  ErrorCurve curve;
  double last = -1.0;
  for (const auto& e : trace.entries) {
    if (e.chunk_end_ms > t_c_ms) continue;
    const double t = e.chunk_end_ms / t_c_ms;
    if (t <= last) throw std::invalid_argument("error_curve: chunk end times must increase");
    last = t;
    curve.points.push_back({t, e.y_pred * scale / y_gt});
  }
  if (!curve.points.empty())
    curve.first_prediction_t_norm = curve.points.front().t_norm;
  else if (!trace.entries.empty())
    curve.first_prediction_t_norm = trace.entries.front().chunk_end_ms / t_c_ms;
  return curve;
}

namespace {

double deviation(double ratio, Deviation d) {
  const double x = ratio - 1.0;
  return d == Deviation::kAbsolute ? std::abs(x) : x * x;
}

}  // namespace

double eot(const ErrorCurve& curve, const EotOptions& options) {
  if (curve.points.empty()) {
    if (!curve.first_prediction_t_norm) return 1.0;
    return options.no_prediction_penalty * std::min(1.0, std::max(0.0, *curve.first_prediction_t_norm));
  }
  for (std::size_t i = 1; i < curve.points.size(); ++i)
    if (curve.points[i].t_norm < curve.points[i - 1].t_norm)
      throw std::invalid_argument("eot: t_norm must be non-decreasing");
  const double t0 = std::clamp(curve.first_prediction_t_norm.value_or(curve.points.front().t_norm), 0.0, 1.0);
  double area = options.no_prediction_penalty * t0;
  for (std::size_t i = 1; i < curve.points.size(); ++i) {
    const auto& a = curve.points[i - 1];
    const auto& b = curve.points[i];
    area += 0.5 * (deviation(a.ratio, options.deviation) + deviation(b.ratio, options.deviation)) *
            (std::min(b.t_norm, 1.0) - std::min(a.t_norm, 1.0));
  }
  const auto& tail = curve.points.back();
  area += deviation(tail.ratio, options.deviation) * std::max(0.0, 1.0 - tail.t_norm);
  return area;
}

ConstantPredictor::ConstantPredictor(const std::vector<double>& train_labels) {
  if (train_labels.empty()) throw std::invalid_argument("baseline: no training labels");
  value_ = std::accumulate(train_labels.begin(), train_labels.end(), 0.0) / static_cast<double>(train_labels.size());
}

model::PredictionTrace ConstantPredictor::trace(const std::vector<double>& chunk_end_ms, double scale) const {
  model::PredictionTrace t;
  for (double end : chunk_end_ms) {
    model::TraceEntry e;
    e.chunk_end_ms = end;
    e.y_pred = value_ / scale;
    t.entries.push_back(e);
  }
  return t;
}

std::optional<double> detection_latency(const model::PredictionTrace& trace, double event_ms, int target_class,
                                        int sustain) {
  if (sustain < 1) throw std::invalid_argument("detection_latency: sustain must be >= 1");
  const auto& e = trace.entries;
  for (std::size_t k = 0; k < e.size(); ++k) {
    if (e[k].chunk_end_ms <= event_ms) continue;
    if (k + static_cast<std::size_t>(sustain) > e.size()) break;
    bool held = true;
    for (std::size_t j = k; j < k + static_cast<std::size_t>(sustain); ++j) held = held && e[j].predicted_class == target_class;
    if (held) return e[k].chunk_end_ms - event_ms;
  }
  return std::nullopt;
}

EotSummary summarize(const std::vector<SequenceScore>& scores) {
  EotSummary s;
  s.sequences = static_cast<int>(scores.size());
  std::map<double, double> sums;
  double total = 0.0;
  for (const auto& sc : scores) {
    total += sc.eot;
    sums[sc.strength] += sc.eot;
    ++s.per_strength_count[sc.strength];
  }
  s.eot = scores.empty() ? 0.0 : total / static_cast<double>(scores.size());
  for (const auto& [k, v] : sums) s.per_strength[k] = v / s.per_strength_count[k];
  return s;
}

}  // namespace evmap::eval
