#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "sparseadapt/adapter.hpp"
#include "sparseadapt/dataset.hpp"
#include "sparseadapt/errors.hpp"
#include "sparseadapt/merging.hpp"
#include "sparseadapt/model.hpp"
#include "sparseadapt/taskgen.hpp"
#include "sparseadapt/trainer.hpp"

namespace sparseadapt {

/// What produced the evaluated model.
struct ModelDescriptor {
  std::string method;  // "base", "sparse", "block-sparse", "lora", "full", "multitask", merge names
  double kr = 0.0;
  int rank = 0;
  std::string merge;  // merge spec summary, empty for single models
};

struct EvalResult {
  std::string task_id;
  std::string metric = "accuracy";
  double value = 0.0;  // in [0, 1]
  ModelDescriptor descriptor;
  uint64_t seed = 0;
};

/// Fraction of test examples whose argmax logit matches the label; argmax
/// ties resolve to the lowest class index.
inline double accuracy(const Model& model, const std::map<std::string, Matrix>& overrides,
                       const std::vector<Example>& examples) {
  if (examples.empty()) throw InputError("accuracy: empty split");
  std::vector<size_t> order(examples.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  const size_t chunk = 64;
  long correct = 0;
  for (size_t b = 0; b < examples.size(); b += chunk) {
    const size_t e = std::min(examples.size(), b + chunk);
    const Batch batch = make_batch(examples, order, b, e);
    const Matrix logits = predict_logits(model, overrides, batch);
    for (int i = 0; i < logits.rows; ++i) {
      int best = 0;
      for (int j = 1; j < logits.cols; ++j) {
        if (logits.at(i, j) > logits.at(i, best)) best = j;
      }
      correct += best == batch.labels[static_cast<size_t>(i)];
    }
  }
  return static_cast<double>(correct) / static_cast<double>(examples.size());
}

inline EvalResult evaluate(const Model& model, const std::map<std::string, Matrix>& overrides,
                           const Dataset& task, ModelDescriptor desc, uint64_t seed = 0) {
  if (task.test.empty()) throw InputError("evaluate: task '" + task.task_id + "' has no test split");
  EvalResult r;
  r.task_id = task.task_id;
  r.value = accuracy(model, overrides, task.test);
  r.descriptor = std::move(desc);
  r.seed = seed;
  return r;
}

inline EvalResult evaluate(const Model& model, const Adapter& adapter, const Dataset& task,
                           ModelDescriptor desc = {}, uint64_t seed = 0) {
  if (desc.method.empty()) {
    desc.method = adapter.config.block_size ? "block-sparse" : "sparse";
    desc.kr = adapter.config.kr;
  }
  return evaluate(model, delta_overrides(model, adapter), task, std::move(desc), seed);
}

inline EvalResult evaluate(const Model& model, const TaskVector& tv, const Dataset& task,
                           ModelDescriptor desc = {}, uint64_t seed = 0) {
  if (desc.method.empty()) desc.method = "full";
  return evaluate(model, delta_overrides(model, tv), task, std::move(desc), seed);
}

/// The merged delta restricted to one task's mask: only coordinates the
/// task itself selected survive; everything else contributes zero.
inline Adapter restrict_to_masks(const Adapter& merged, const Adapter& task_adapter) {
  Adapter out;
  out.task_id = merged.task_id + "|" + task_adapter.task_id;
  out.config = merged.config;
  for (const auto& [id, ld] : task_adapter.layers) {
    auto it = merged.layers.find(id);
    if (it == merged.layers.end()) throw InputError("restrict_to_masks: layer '" + id + "' missing");
    LayerDelta r;
    r.mask = ld.mask;
    r.values = Matrix(it->second.values.rows, it->second.values.cols);
    ld.mask.for_each_element([&](int rr, int cc) { r.values.at(rr, cc) = it->second.values.at(rr, cc); });
    out.layers.emplace(id, std::move(r));
  }
  return out;
}

/// Per-task (single, masked-only, full-merged) accuracies: the task's own
/// adapter, the merged delta seen only through the task's mask, and the
/// complete merged delta.
struct InterferenceTriple {
  std::string task_id;
  double single = 0.0;
  double masked_only = 0.0;
  double full_merged = 0.0;
};

inline std::vector<InterferenceTriple> interference_decomposition(
    const Model& model, const Adapter& merged, const std::vector<Adapter>& adapters,
    const std::vector<Dataset>& tasks) {
  if (adapters.size() != tasks.size() || adapters.empty()) {
    throw InputError("interference_decomposition: adapters and tasks must align");
  }
  for (size_t i = 0; i < tasks.size(); ++i) {
    if (adapters[i].task_id != tasks[i].task_id) {
      throw InputError("interference_decomposition: adapter '" + adapters[i].task_id +
                       "' does not match task '" + tasks[i].task_id + "'");
    }
  }
  std::vector<InterferenceTriple> out;
  const std::map<std::string, Matrix> merged_over = delta_overrides(model, merged);
  for (size_t i = 0; i < tasks.size(); ++i) {
    InterferenceTriple t;
    t.task_id = tasks[i].task_id;
    t.single = accuracy(model, delta_overrides(model, adapters[i]), tasks[i].test);
    const Adapter masked = restrict_to_masks(merged, adapters[i]);
    t.masked_only = accuracy(model, delta_overrides(model, masked), tasks[i].test);
    t.full_merged = accuracy(model, merged_over, tasks[i].test);
    out.push_back(std::move(t));
  }
  return out;
}

struct SweepSeries {
  std::string name;
  std::vector<double> mean;
  std::vector<double> lo;      // min over trials
  std::vector<double> hi;      // max over trials
  std::vector<double> stddev;  // over trials
};

struct SweepReport {
  std::string axis;                 // "experts" | "kr" | "block-size" | "layers"
  std::vector<double> points;       // numeric axis values (index for categorical)
  std::vector<std::string> labels;  // categorical axis labels, else empty
  int trials = 1;
  uint64_t seed = 0;
  std::vector<SweepSeries> series;
};

namespace detail {
struct TrialStats {
  double mean = 0, lo = 0, hi = 0, sd = 0;
};
inline TrialStats trial_stats(const std::vector<double>& xs) {
  TrialStats s;
  s.lo = std::numeric_limits<double>::infinity();
  s.hi = -std::numeric_limits<double>::infinity();
  for (double x : xs) {
    s.mean += x;
    s.lo = std::min(s.lo, x);
    s.hi = std::max(s.hi, x);
  }
  s.mean /= static_cast<double>(xs.size());
  double var = 0;
  for (double x : xs) var += (x - s.mean) * (x - s.mean);
  s.sd = xs.size() > 1 ? std::sqrt(var / static_cast<double>(xs.size() - 1)) : 0.0;
  return s;
}
inline void push_stats(SweepSeries& series, const std::vector<double>& xs) {
  const TrialStats s = trial_stats(xs);
  series.mean.push_back(s.mean);
  series.lo.push_back(s.lo);
  series.hi.push_back(s.hi);
  series.stddev.push_back(s.sd);
}
}  // namespace detail

/// Trained experts for one suite, aligned index-by-index with `tasks`.
struct ExpertPool {
  const Model* model = nullptr;
  const std::vector<Dataset>* tasks = nullptr;
  std::vector<Adapter> sparse;
  std::vector<TaskVector> fft;
  std::vector<LoraAdapter> lora;

  size_t size() const { return tasks ? tasks->size() : 0; }
};

/// Merge a subset of experts with the given method and return the mean test
/// accuracy over exactly those tasks.
inline double merged_subset_accuracy(const ExpertPool& pool, const MergeSpec& spec,
                                     const std::vector<size_t>& subset) {
  std::map<std::string, Matrix> over;
  switch (spec.method) {
    case MergeMethod::SparseOverlap: {
      std::vector<Adapter> members;
      for (size_t i : subset) members.push_back(pool.sparse.at(i));
      over = delta_overrides(*pool.model, merge_sparse(members));
      break;
    }
    case MergeMethod::LoraAverage: {
      std::vector<LoraAdapter> members;
      for (size_t i : subset) members.push_back(pool.lora.at(i));
      over = delta_overrides(*pool.model, merge_lora(members));
      break;
    }
    default: {
      std::vector<TaskVector> members;
      for (size_t i : subset) members.push_back(pool.fft.at(i));
      TaskVector merged;
      if (spec.method == MergeMethod::Uniform) merged = merge_uniform(members);
      else if (spec.method == MergeMethod::TaskArithmetic) merged = task_arithmetic(members, spec.lambda);
      else if (spec.method == MergeMethod::Ties) merged = ties(members, spec.lambda, spec.ties_trim_fraction);
      else merged = breadcrumbs(members, spec.lambda, spec.breadcrumbs_top, spec.breadcrumbs_bottom);
      over = delta_overrides(*pool.model, merged);
      break;
    }
  }
  double acc = 0.0;
  for (size_t i : subset) acc += accuracy(*pool.model, over, pool.tasks->at(i).test);
  return acc / static_cast<double>(subset.size());
}

/// N-expert scaling sweep: for each N, `trials` random subsets are merged
/// per method and evaluated on the member tasks' test sets.
inline SweepReport scaling_sweep(const ExpertPool& pool, const std::vector<MergeSpec>& methods,
                                 const std::vector<int>& n_values, int trials, uint64_t seed) {
  if (n_values.empty()) throw InputError("scaling_sweep: empty N grid");
  if (trials < 1) throw InputError("scaling_sweep: trials must be >= 1");
  for (int n : n_values) {
    if (n < 1 || static_cast<size_t>(n) > pool.size()) {
      throw InputError("scaling_sweep: N = " + std::to_string(n) + " exceeds the " +
                       std::to_string(pool.size()) + " available experts");
    }
  }
  SweepReport rep;
  rep.axis = "experts";
  rep.trials = trials;
  rep.seed = seed;
  for (int n : n_values) rep.points.push_back(static_cast<double>(n));

  // Subsets are shared across methods so the comparison is paired.
  std::vector<std::vector<std::vector<size_t>>> subsets;  // [n_index][trial] -> indices
  Rng rng = Rng(seed).fork(11);
  for (int n : n_values) {
    std::vector<std::vector<size_t>> per_trial;
    for (int t = 0; t < trials; ++t) {
      std::vector<size_t> all(pool.size());
      for (size_t i = 0; i < all.size(); ++i) all[i] = i;
      shuffle(all, rng);
      per_trial.emplace_back(all.begin(), all.begin() + n);
    }
    subsets.push_back(std::move(per_trial));
  }

  for (const MergeSpec& spec : methods) {
    SweepSeries series;
    series.name = merge_method_name(spec.method);
    for (size_t ni = 0; ni < n_values.size(); ++ni) {
      std::vector<double> vals;
      for (int t = 0; t < trials; ++t) {
        vals.push_back(merged_subset_accuracy(pool, spec, subsets[ni][static_cast<size_t>(t)]));
      }
      detail::push_stats(series, vals);
    }
    rep.series.push_back(std::move(series));
  }
  return rep;
}

/// Keep-ratio sweep: per kr, train a sparse expert per task, report the mean
/// single-task accuracy and the sparse-overlap merged accuracy.
inline SweepReport kr_sweep(const Model& model, const std::vector<Dataset>& tasks,
                            const std::vector<double>& kr_values, const TrainConfig& base_cfg) {
  if (kr_values.empty()) throw InputError("kr_sweep: empty kr grid");
  if (tasks.empty()) throw InputError("kr_sweep: no tasks");
  SweepReport rep;
  rep.axis = "kr";
  rep.trials = 1;
  rep.seed = base_cfg.seed;
  SweepSeries single{"single", {}, {}, {}, {}};
  SweepSeries merged{"merged", {}, {}, {}, {}};
  for (double kr : kr_values) {
    rep.points.push_back(kr);
    TrainConfig cfg = base_cfg;
    cfg.kr = kr;
    std::vector<Adapter> adapters;
    std::vector<double> singles;
    for (const Dataset& task : tasks) {
      adapters.push_back(train_sparse(model, task, cfg));
      singles.push_back(accuracy(model, delta_overrides(model, adapters.back()), task.test));
    }
    detail::push_stats(single, singles);
    const Adapter m = merge_sparse(adapters);
    const std::map<std::string, Matrix> over = delta_overrides(model, m);
    std::vector<double> merged_accs;
    for (const Dataset& task : tasks) merged_accs.push_back(accuracy(model, over, task.test));
    detail::push_stats(merged, merged_accs);
  }
  rep.series.push_back(std::move(single));
  rep.series.push_back(std::move(merged));
  return rep;
}

/// Block-size sweep at fixed kr (single-task and merged accuracy per B).
inline SweepReport block_size_sweep(const Model& model, const std::vector<Dataset>& tasks,
                                    const std::vector<int>& b_values, const TrainConfig& base_cfg) {
  if (b_values.empty()) throw InputError("block_size_sweep: empty grid");
  SweepReport rep;
  rep.axis = "block-size";
  rep.trials = 1;
  rep.seed = base_cfg.seed;
  SweepSeries single{"single", {}, {}, {}, {}};
  SweepSeries merged{"merged", {}, {}, {}, {}};
  for (int b : b_values) {
    rep.points.push_back(static_cast<double>(b));
    TrainConfig cfg = base_cfg;
    cfg.block_size = b;
    std::vector<Adapter> adapters;
    std::vector<double> singles;
    for (const Dataset& task : tasks) {
      adapters.push_back(train_sparse(model, task, cfg));
      singles.push_back(accuracy(model, delta_overrides(model, adapters.back()), task.test));
    }
    detail::push_stats(single, singles);
    const std::map<std::string, Matrix> over = delta_overrides(model, merge_sparse(adapters));
    std::vector<double> merged_accs;
    for (const Dataset& task : tasks) merged_accs.push_back(accuracy(model, over, task.test));
    detail::push_stats(merged, merged_accs);
  }
  rep.series.push_back(std::move(single));
  rep.series.push_back(std::move(merged));
  return rep;
}

/// Adapt-target sweep over {QKV, QKV+O, MLP}: single and merged accuracy
/// (held-in and held-out) per layer-selection choice.
inline SweepReport layers_sweep(const Model& base_model, const std::vector<Dataset>& held_in,
                                const std::vector<Dataset>& held_out, const TrainConfig& base_cfg) {
  SweepReport rep;
  rep.axis = "layers";
  rep.trials = 1;
  rep.seed = base_cfg.seed;
  const std::vector<std::pair<std::string, std::vector<AdaptTarget>>> choices = {
      {"qkv", {AdaptTarget::QKV}},
      {"qkv+o", {AdaptTarget::QKV, AdaptTarget::O}},
      {"mlp", {AdaptTarget::MLP}},
  };
  SweepSeries single{"single", {}, {}, {}, {}};
  SweepSeries merged_in{"merged-held-in", {}, {}, {}, {}};
  SweepSeries merged_out{"merged-held-out", {}, {}, {}, {}};
  int index = 0;
  for (const auto& [label, targets] : choices) {
    rep.points.push_back(static_cast<double>(index++));
    rep.labels.push_back(label);
    Model model = base_model;
    model.config.adapt_targets = targets;
    std::vector<Adapter> adapters;
    std::vector<double> singles;
    for (const Dataset& task : held_in) {
      adapters.push_back(train_sparse(model, task, base_cfg));
      singles.push_back(accuracy(model, delta_overrides(model, adapters.back()), task.test));
    }
    detail::push_stats(single, singles);
    const std::map<std::string, Matrix> over = delta_overrides(model, merge_sparse(adapters));
    std::vector<double> in_accs, out_accs;
    for (const Dataset& task : held_in) in_accs.push_back(accuracy(model, over, task.test));
    for (const Dataset& task : held_out) out_accs.push_back(accuracy(model, over, task.test));
    detail::push_stats(merged_in, in_accs);
    detail::push_stats(merged_out, out_accs);
  }
  rep.series.push_back(std::move(single));
  rep.series.push_back(std::move(merged_in));
  rep.series.push_back(std::move(merged_out));
  return rep;
}

/// Suite generation with the learnability gate: every held-in task must be
/// trainable to > gate_accuracy by dense fine-tuning of the adapted layers
/// and must not be solvable by the raw base model. Failing tasks are
/// reseeded and regenerated. The gate trainings double as FFT experts.
struct GatedSuite {
  std::vector<Dataset> held_in;
  std::vector<Dataset> held_out;
  std::vector<TaskVector> fft_experts;  // aligned with held_in
  std::vector<double> fft_accuracy;
};

inline GatedSuite build_gated_suite(const Model& model, int n_held_in, int n_held_out,
                                    uint64_t seed, SuiteParams params, const TrainConfig& gate_cfg,
                                    double gate_accuracy = 0.9, double too_easy_accuracy = 0.5,
                                    int max_regen = 8) {
  params.arch = model.config;
  auto [in_specs, out_specs] = build_suite_specs(n_held_in, n_held_out, seed, params);
  GatedSuite suite;
  for (TaskSpec& spec : in_specs) {
    bool ok = false;
    for (int attempt = 0; attempt <= max_regen && !ok; ++attempt) {
      Dataset ds = generate_task(spec);
      const double base_acc = accuracy(model, {}, ds.test);
      if (base_acc > too_easy_accuracy) {
        spec.seed = detail::mix64(spec.seed + 0xBADB);
        continue;
      }
      TrainConfig cfg = gate_cfg;
      cfg.seed = Rng(gate_cfg.seed).fork(suite.held_in.size() + 101).seed();
      TaskVector fft = train_full(model, ds, cfg);
      const double acc = accuracy(model, delta_overrides(model, fft), ds.test);
      if (acc > gate_accuracy) {
        suite.held_in.push_back(std::move(ds));
        suite.fft_experts.push_back(std::move(fft));
        suite.fft_accuracy.push_back(acc);
        ok = true;
      } else {
        spec.seed = detail::mix64(spec.seed + 0xBADB);
      }
    }
    if (!ok) {
      throw InputError("build_gated_suite: task '" + spec.task_id +
                       "' failed the learnability gate after regeneration");
    }
  }
  for (const TaskSpec& spec : out_specs) suite.held_out.push_back(generate_task(spec));
  return suite;
}

/// One CSV row per EvalResult.
inline void write_eval_csv(std::ostream& os, const std::vector<EvalResult>& results) {
  os << "task,metric,value,method,kr,rank,merge,seed\n";
  for (const EvalResult& r : results) {
    os << r.task_id << ',' << r.metric << ',' << r.value << ',' << r.descriptor.method << ','
       << r.descriptor.kr << ',' << r.descriptor.rank << ',' << r.descriptor.merge << ',' << r.seed
       << '\n';
  }
}

inline void write_eval_csv_file(const std::string& path, const std::vector<EvalResult>& results) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  write_eval_csv(f, results);
  if (!f.good()) throw IoError("write failed for '" + path + "'");
}

inline nlohmann::json sweep_report_json(const SweepReport& rep) {
  nlohmann::json j;
  j["axis"] = rep.axis;
  j["points"] = rep.points;
  if (!rep.labels.empty()) j["labels"] = rep.labels;
  j["trials"] = rep.trials;
  j["seed"] = rep.seed;
  j["series"] = nlohmann::json::array();
  for (const SweepSeries& s : rep.series) {
    nlohmann::json js;
    js["name"] = s.name;
    js["mean"] = s.mean;
    js["min"] = s.lo;
    js["max"] = s.hi;
    js["stddev"] = s.stddev;
    j["series"].push_back(std::move(js));
  }
  return j;
}

inline void write_sweep_json_file(const std::string& path, const SweepReport& rep) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f << sweep_report_json(rep).dump(2) << '\n';
  if (!f.good()) throw IoError("write failed for '" + path + "'");
}

}  // namespace sparseadapt
