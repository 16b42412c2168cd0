#pragma once

// Regret against a comparator run, nats/token, FLOPs totals and Pareto fronts
// over (flops, mean nll).

#include <algorithm>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dyneval/engines.hpp"
#include "dyneval/errors.hpp"
#include "dyneval/json_enum.hpp"

namespace dyneval {

class StreamMismatchError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RegretSeries {
  std::vector<std::size_t> positions;
  std::vector<double> regret;
  std::vector<std::size_t> boundary_positions;
};

inline void to_json(nlohmann::json& j, const RegretSeries& r) {
  j = nlohmann::json{
      {"positions", r.positions}, {"regret", r.regret}, {"boundary_positions", r.boundary_positions}};
}

inline void from_json(const nlohmann::json& j, RegretSeries& r) {
  r.positions = j.at("positions").get<std::vector<std::size_t>>();
  r.regret = j.at("regret").get<std::vector<double>>();
  r.boundary_positions = j.at("boundary_positions").get<std::vector<std::size_t>>();
}

// Cumulative nll of `run` minus cumulative nll of `comparator`, position by
// position. Both must cover the same positions and documents.
inline RegretSeries regret(std::span<const EvalRecord> run, std::span<const EvalRecord> comparator) {
  if (run.size() != comparator.size()) {
    throw StreamMismatchError("regret: run has " + std::to_string(run.size()) + " records, comparator has " +
                              std::to_string(comparator.size()));
  }
  RegretSeries out;
  out.positions.reserve(run.size());
  out.regret.reserve(run.size());
  double acc_run = 0, acc_cmp = 0;
  for (std::size_t i = 0; i < run.size(); ++i) {
    if (run[i].pos != comparator[i].pos || run[i].doc != comparator[i].doc) {
      throw StreamMismatchError("regret: record " + std::to_string(i) + " covers a different token");
    }
    acc_run += run[i].nll;
    acc_cmp += comparator[i].nll;
    out.positions.push_back(run[i].pos);
    out.regret.push_back(acc_run - acc_cmp);
    if (i == 0 || run[i].doc != run[i - 1].doc) out.boundary_positions.push_back(run[i].pos);
  }
  return out;
}

inline double total_nll(std::span<const EvalRecord> records) {
  double s = 0;
  for (const auto& r : records) s += r.nll;
  return s;
}

inline double mean_nll(std::span<const EvalRecord> records) {
  if (records.empty()) throw UsageError("mean_nll: no records");
  return total_nll(records) / static_cast<double>(records.size());
}

enum class FlopsMode { forward_only, with_backward_and_update };

DYNEVAL_JSON_ENUM(FlopsMode, {{FlopsMode::forward_only, "forward_only"},
                                         {FlopsMode::with_backward_and_update, "with_backward_and_update"}})

// Sums forward FLOPs over the run's invocations; the full mode adds 2x forward
// for invocations that ran backward and 10 per trainable parameter per update.
inline double flops_total(const EvalRun& run, FlopsMode mode) {
  double total = 0;
  for (const auto& inc : run.increments) {
    const double fwd = count_flops_forward(run.model, inc.length, inc.attended, run.extra_matmul_params);
    total += fwd;
    if (mode == FlopsMode::with_backward_and_update) {
      if (inc.backward) total += 2.0 * fwd;
      if (inc.updated) total += 10.0 * run.trainable_params;
    }
  }
  return total;
}

struct ParetoPoint {
  double flops_total = 0;
  double mean_nll = 0;
  nlohmann::json label = nlohmann::json::object();

  bool operator==(const ParetoPoint&) const = default;
};

inline void to_json(nlohmann::json& j, const ParetoPoint& p) {
  j = nlohmann::json{{"flops_total", p.flops_total}, {"mean_nll", p.mean_nll}, {"label", p.label}};
}

inline void from_json(const nlohmann::json& j, ParetoPoint& p) {
  p.flops_total = j.at("flops_total").get<double>();
  p.mean_nll = j.at("mean_nll").get<double>();
  p.label = j.value("label", nlohmann::json::object());
}

// a dominates b: no worse on both axes and strictly better on one.
inline bool dominates(const ParetoPoint& a, const ParetoPoint& b) {
  return a.flops_total <= b.flops_total && a.mean_nll <= b.mean_nll &&
         (a.flops_total < b.flops_total || a.mean_nll < b.mean_nll);
}

// Points no other point dominates, ties and duplicates kept, sorted by flops
// then nll. Sort-and-sweep: after sorting, a point survives iff its nll is
// not above the best nll seen at strictly smaller flops, nor above the best
// nll at equal flops.
inline std::vector<ParetoPoint> pareto_front(std::vector<ParetoPoint> points) {
  std::stable_sort(points.begin(), points.end(), [](const ParetoPoint& a, const ParetoPoint& b) {
    return a.flops_total != b.flops_total ? a.flops_total < b.flops_total : a.mean_nll < b.mean_nll;
  });
  std::vector<ParetoPoint> front;
  double best_before = std::numeric_limits<double>::infinity();  // min nll at smaller flops
  std::size_t i = 0;
  while (i < points.size()) {
    std::size_t j = i;
    while (j < points.size() && points[j].flops_total == points[i].flops_total) ++j;
    const double group_best = points[i].mean_nll;
    if (group_best < best_before) {
      for (std::size_t k = i; k < j && points[k].mean_nll == group_best; ++k) front.push_back(points[k]);
      best_before = group_best;
    }
    i = j;
  }
  return front;
}

inline ParetoPoint make_point(std::span<const EvalRecord> records, double flops, nlohmann::json label) {
  return {flops, mean_nll(records), std::move(label)};
}

// Point for a whole run, charging forward, backward and update FLOPs.
inline ParetoPoint make_point(const EvalRun& run, nlohmann::json label) {
  return make_point(run.records, flops_total(run, FlopsMode::with_backward_and_update), std::move(label));
}

}  // namespace dyneval
