#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "evmap/model/model.hpp"

namespace evmap::eval {

struct CurvePoint {
  double t_norm = 0.0;  // t_observe / T_c
  double ratio = 0.0;   // y_pred / y_gt
};

struct ErrorCurve {
  std::vector<CurvePoint> points;
  std::optional<double> first_prediction_t_norm;
};

// Keeps predictions whose chunk ends at or before T_c. `scale` converts trace
// outputs to label units. Throws std::invalid_argument when y_gt or T_c is not positive.
ErrorCurve error_curve(const model::PredictionTrace& trace, double scale, double y_gt, double t_c_ms);

enum class Deviation { kAbsolute, kSquared };

struct EotOptions {
  Deviation deviation = Deviation::kAbsolute;
  double no_prediction_penalty = 1.0;  // error before the first prediction
};

// Area under e(t) = dev(ratio(t) - 1) on [0, 1]: the penalty before the first
// prediction, trapezoids between points, the last value held to 1. A curve with
// no points and no first prediction scores 1.
double eot(const ErrorCurve& curve, const EotOptions& options = {});

// Predicts the mean training label at every chunk.
class ConstantPredictor {
 public:
  explicit ConstantPredictor(const std::vector<double>& train_labels);
  double value() const { return value_; }
  // Trace with one entry per chunk end; y_pred is value / scale.
  model::PredictionTrace trace(const std::vector<double>& chunk_end_ms, double scale) const;

 private:
  double value_ = 0.0;
};

// Time from `event_ms` to the end of the first chunk at or after it whose predicted
// class equals `target_class` for `sustain` consecutive chunks. Nullopt if never.
std::optional<double> detection_latency(const model::PredictionTrace& trace, double event_ms, int target_class,
                                        int sustain = 2);

struct EotSummary {
  double eot = 0.0;
  std::map<double, double> per_strength;
  std::map<double, int> per_strength_count;
  int sequences = 0;
};

struct SequenceScore {
  double strength = 0.0;
  double eot = 0.0;
};

EotSummary summarize(const std::vector<SequenceScore>& scores);

}  // namespace evmap::eval
