#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "sparseadapt/dataset.hpp"
#include "sparseadapt/errors.hpp"
#include "sparseadapt/model.hpp"
#include "sparseadapt/rng.hpp"

namespace sparseadapt {

enum class GeneratorFamily { TeacherNetwork, SequencePattern };

/// Parameters of the frozen labeling network for TeacherNetwork tasks. The
/// teacher is the shared base model with a planted sparse delta on the
/// adapted layers and a task-specific perturbed head, so each task is
/// (approximately) expressible inside the student's trainable subspace.
struct TeacherParams {
  uint64_t base_seed = 1;        // seed of the shared base model
  double delta_scale = 2.0;      // planted delta std, relative to 1/sqrt(cols)
  double delta_density = 0.2;    // support fraction of the planted delta
  double head_perturb = 0.05;    // task head = base head + this * scaled noise
  double margin = 1.0;           // min top1-top2 logit gap for accepted examples
};

struct TaskSpec {
  std::string task_id;
  GeneratorFamily family = GeneratorFamily::TeacherNetwork;
  ModelConfig arch;             // architecture shared with the student model
  TeacherParams teacher;
  int pattern_kind = 0;         // SequencePattern: 0 modal residue, 1 position-weighted residue
  int marker_token = -1;        // >= 0: fixed task-identifying token at position 0
  int train_size = 384;
  int val_size = 128;
  int test_size = 256;
  uint64_t seed = 0;

  void validate() const {
    arch.validate();
    if (task_id.empty() || task_id.find(' ') != std::string::npos) {
      throw InputError("TaskSpec: task_id must be nonempty and spaceless");
    }
    if (train_size <= 0 || val_size <= 0 || test_size <= 0) {
      throw InputError("TaskSpec: split sizes must be positive");
    }
    if (marker_token >= arch.vocab_size) throw InputError("TaskSpec: marker token outside vocab");
    if (pattern_kind < 0 || pattern_kind > 1) throw InputError("TaskSpec: unknown pattern kind");
  }
};

namespace detail {

inline std::vector<int> random_sequence(const TaskSpec& spec, Rng& rng) {
  std::vector<int> toks(static_cast<size_t>(spec.arch.seq_len));
  for (int i = 0; i < spec.arch.seq_len; ++i) {
    toks[static_cast<size_t>(i)] =
        static_cast<int>(rng.next_below(static_cast<uint64_t>(spec.arch.vocab_size)));
  }
  if (spec.marker_token >= 0) toks[0] = spec.marker_token;
  return toks;
}

inline int pattern_label(const TaskSpec& spec, const std::vector<int>& toks) {
  const int C = spec.arch.num_classes;
  const size_t first = spec.marker_token >= 0 ? 1 : 0;  // skip the fixed marker
  if (spec.pattern_kind == 0) {
    // Most frequent residue class of the content tokens; ties -> smallest.
    std::vector<int> counts(static_cast<size_t>(C), 0);
    for (size_t i = first; i < toks.size(); ++i) counts[static_cast<size_t>(toks[i] % C)]++;
    return static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
  }
  // Position-weighted residue.
  long acc = 0;
  for (size_t i = first; i < toks.size(); ++i) acc += static_cast<long>(i + 1) * toks[i];
  return static_cast<int>(acc % C);
}

/// The frozen labeling model for a TeacherNetwork task.
inline Model build_teacher(const TaskSpec& spec) {
  Model teacher = build_model(spec.arch, Rng(spec.teacher.base_seed));
  Rng rng = Rng(spec.seed).fork(0x7EAC);
  for (const std::string& id : adapted_layer_ids(spec.arch)) {
    Matrix& w = teacher.weights.at(id);
    const double sd = spec.teacher.delta_scale / std::sqrt(static_cast<double>(w.cols));
    // Planted sparse delta: each coordinate shifts with probability
    // delta_density. Both draws happen unconditionally to keep the
    // stream aligned regardless of acceptance.
    for (size_t i = 0; i < w.size(); ++i) {
      const double u = rng.next_double();
      const double g = rng.next_normal();
      if (u < spec.teacher.delta_density) w.data[i] += g * sd;
    }
  }
  Matrix& head = teacher.weights.at("head");
  const double hsd = spec.teacher.head_perturb / std::sqrt(static_cast<double>(head.cols));
  for (double& v : head.data) v += rng.next_normal() * hsd;
  return teacher;
}

}  // namespace detail

/// Deterministic dataset generation: same spec, same bits. Labels are
/// quota-balanced per class by rejection, so every class frequency stays
/// within a factor of two of uniform. Splits are pairwise disjoint because
/// every accepted sequence is unique.
inline Dataset generate_task(const TaskSpec& spec) {
  spec.validate();
  const int C = spec.arch.num_classes;
  const int total = spec.train_size + spec.val_size + spec.test_size;
  std::vector<int> quota(static_cast<size_t>(C), total / C);
  for (int c = 0; c < total % C; ++c) quota[static_cast<size_t>(c)]++;

  Model teacher;
  if (spec.family == GeneratorFamily::TeacherNetwork) teacher = detail::build_teacher(spec);

  Rng rng = Rng(spec.seed).fork(1);
  std::set<std::vector<int>> seen;
  std::vector<Example> accepted;
  accepted.reserve(static_cast<size_t>(total));

  const int chunk = 64;
  long attempts = 0;
  const long attempt_cap = 512L * total;
  while (static_cast<int>(accepted.size()) < total) {
    if (attempts > attempt_cap) {
      throw InputError("generate_task: class quotas unreachable for task '" + spec.task_id + "'");
    }
    // Draw a chunk of fresh candidate sequences.
    std::vector<std::vector<int>> cands;
    while (static_cast<int>(cands.size()) < chunk) {
      ++attempts;
      std::vector<int> toks = detail::random_sequence(spec, rng);
      if (seen.insert(toks).second) cands.push_back(std::move(toks));
      if (attempts > attempt_cap) break;
    }
    if (cands.empty()) continue;

    std::vector<int> labels(cands.size());
    std::vector<bool> confident(cands.size(), true);
    if (spec.family == GeneratorFamily::TeacherNetwork) {
      Batch b;
      b.batch_size = static_cast<int>(cands.size());
      b.seq_len = spec.arch.seq_len;
      for (const auto& toks : cands) b.tokens.insert(b.tokens.end(), toks.begin(), toks.end());
      b.labels.assign(cands.size(), 0);  // unused by the forward pass
      const Matrix logits = predict_logits(teacher, {}, b);
      for (int i = 0; i < logits.rows; ++i) {
        int best = 0;
        for (int j = 1; j < C; ++j) {
          if (logits.at(i, j) > logits.at(i, best)) best = j;
        }
        double second = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < C; ++j) {
          if (j != best) second = std::max(second, logits.at(i, j));
        }
        labels[static_cast<size_t>(i)] = best;
        // Boundary inputs (small top1-top2 gap) are rejected; the task's
        // input distribution is conditioned on a confident teacher.
        confident[static_cast<size_t>(i)] = logits.at(i, best) - second >= spec.teacher.margin;
      }
    } else {
      for (size_t i = 0; i < cands.size(); ++i) labels[i] = detail::pattern_label(spec, cands[i]);
    }

    for (size_t i = 0; i < cands.size() && static_cast<int>(accepted.size()) < total; ++i) {
      const int y = labels[i];
      if (confident[i] && quota[static_cast<size_t>(y)] > 0) {
        quota[static_cast<size_t>(y)]--;
        accepted.push_back(Example{std::move(cands[i]), y});
      }
    }
  }

  shuffle(accepted, rng);
  Dataset ds;
  ds.task_id = spec.task_id;
  ds.seed = spec.seed;
  ds.num_classes = C;
  ds.seq_len = spec.arch.seq_len;
  ds.vocab_size = spec.arch.vocab_size;
  ds.train.assign(accepted.begin(), accepted.begin() + spec.train_size);
  ds.val.assign(accepted.begin() + spec.train_size, accepted.begin() + spec.train_size + spec.val_size);
  ds.test.assign(accepted.begin() + spec.train_size + spec.val_size, accepted.end());
  return ds;
}

struct SuiteParams {
  ModelConfig arch;
  uint64_t base_model_seed = 1;
  int train_size = 384;
  int val_size = 128;
  int test_size = 256;
  // Held-out generators draw from a parameter range disjoint from held-in.
  TeacherParams held_in{1, 2.0, 0.2, 0.05, 1.0};
  TeacherParams held_out{1, 3.0, 0.35, 0.15, 1.0};
  double max_pairwise_agreement = 0.8;
  int agreement_probe = 256;
};

/// Agreement of two tasks' labeling functions on shared content (each task
/// sees its own marker token in position 0).
inline double label_agreement(const TaskSpec& a, const TaskSpec& b, int probe, Rng& rng) {
  TaskSpec sa = a, sb = b;
  Model ta, tb;
  if (sa.family == GeneratorFamily::TeacherNetwork) ta = detail::build_teacher(sa);
  if (sb.family == GeneratorFamily::TeacherNetwork) tb = detail::build_teacher(sb);
  auto labels_for = [&](const TaskSpec& spec, const Model& teacher,
                        const std::vector<std::vector<int>>& content) {
    std::vector<int> out(content.size());
    Batch batch;
    batch.batch_size = static_cast<int>(content.size());
    batch.seq_len = spec.arch.seq_len;
    for (auto toks : content) {
      if (spec.marker_token >= 0) toks[0] = spec.marker_token;
      if (spec.family == GeneratorFamily::SequencePattern) {
        // cheap path handled below; tokens still collected for symmetry
      }
      batch.tokens.insert(batch.tokens.end(), toks.begin(), toks.end());
    }
    batch.labels.assign(content.size(), 0);
    if (spec.family == GeneratorFamily::TeacherNetwork) {
      const Matrix logits = predict_logits(teacher, {}, batch);
      for (int i = 0; i < logits.rows; ++i) {
        int best = 0;
        for (int j = 1; j < spec.arch.num_classes; ++j) {
          if (logits.at(i, j) > logits.at(i, best)) best = j;
        }
        out[static_cast<size_t>(i)] = best;
      }
    } else {
      for (size_t i = 0; i < content.size(); ++i) {
        std::vector<int> toks = content[i];
        if (spec.marker_token >= 0) toks[0] = spec.marker_token;
        out[i] = detail::pattern_label(spec, toks);
      }
    }
    return out;
  };

  std::vector<std::vector<int>> content;
  for (int i = 0; i < probe; ++i) content.push_back(detail::random_sequence(a, rng));
  const std::vector<int> la = labels_for(sa, ta, content);
  const std::vector<int> lb = labels_for(sb, tb, content);
  int same = 0;
  for (size_t i = 0; i < la.size(); ++i) same += la[i] == lb[i];
  return static_cast<double>(same) / static_cast<double>(la.size());
}

/// Task specs for a suite: markers 0..n-1 identify held-in tasks, markers
/// n.. identify held-out ones. Held-out parameterizations are disjoint from
/// held-in (different delta range; the last held-out task is a sequence
/// pattern). Tasks whose labeling agrees with an earlier task on >= 80% of
/// shared inputs are reseeded.
inline std::pair<std::vector<TaskSpec>, std::vector<TaskSpec>> build_suite_specs(
    int n_held_in, int n_held_out, uint64_t seed, const SuiteParams& params = {}) {
  if (n_held_in <= 0 || n_held_out <= 0) {
    throw InputError("build_suite: task counts must be positive");
  }
  if (n_held_in + n_held_out > params.arch.vocab_size) {
    throw InputError("build_suite: vocab too small for distinct marker tokens");
  }
  Rng agree_rng = Rng(seed).fork(0xA9);
  std::vector<TaskSpec> all;
  auto make_spec = [&](int index, bool held_in) {
    TaskSpec s;
    s.task_id = (held_in ? "in" : "out") + std::to_string(index);
    s.arch = params.arch;
    s.teacher = held_in ? params.held_in : params.held_out;
    s.teacher.base_seed = params.base_model_seed;
    s.train_size = params.train_size;
    s.val_size = params.val_size;
    s.test_size = params.test_size;
    s.marker_token = held_in ? index : n_held_in + index;
    if (!held_in && index == n_held_out - 1) {
      s.family = GeneratorFamily::SequencePattern;
      s.pattern_kind = 0;
    }
    s.seed = Rng(seed).fork(static_cast<uint64_t>(held_in ? index : 1000 + index)).seed();
    return s;
  };
  auto distinct_enough = [&](const TaskSpec& cand) {
    for (const TaskSpec& other : all) {
      if (label_agreement(cand, other, params.agreement_probe, agree_rng) >=
          params.max_pairwise_agreement) {
        return false;
      }
    }
    return true;
  };
  for (int phase = 0; phase < 2; ++phase) {
    const bool held_in = phase == 0;
    const int n = held_in ? n_held_in : n_held_out;
    for (int i = 0; i < n; ++i) {
      TaskSpec s = make_spec(i, held_in);
      int tries = 0;
      while (!distinct_enough(s)) {
        if (++tries > 64) throw InputError("build_suite: cannot make task distinct: " + s.task_id);
        s.seed = detail::mix64(s.seed + 0x5EED);
      }
      all.push_back(std::move(s));
    }
  }
  std::vector<TaskSpec> held_in(all.begin(), all.begin() + n_held_in);
  std::vector<TaskSpec> held_out(all.begin() + n_held_in, all.end());
  return {held_in, held_out};
}

/// Generates the full suite: (held-in datasets, held-out datasets).
inline std::pair<std::vector<Dataset>, std::vector<Dataset>> build_suite(
    int n_held_in, int n_held_out, uint64_t seed, const SuiteParams& params = {}) {
  auto [in_specs, out_specs] = build_suite_specs(n_held_in, n_held_out, seed, params);
  std::pair<std::vector<Dataset>, std::vector<Dataset>> out;
  for (const TaskSpec& s : in_specs) out.first.push_back(generate_task(s));
  for (const TaskSpec& s : out_specs) out.second.push_back(generate_task(s));
  return out;
}

/// Columnar text format. Header line:
///   task_id train val test num_classes seq_len vocab_size seed
/// then one row per example (train, then val, then test):
///   tok tok ... tok label
inline void write_dataset(std::ostream& os, const Dataset& ds) {
  os << ds.task_id << ' ' << ds.train.size() << ' ' << ds.val.size() << ' ' << ds.test.size() << ' '
     << ds.num_classes << ' ' << ds.seq_len << ' ' << ds.vocab_size << ' ' << ds.seed << '\n';
  auto rows = [&](const std::vector<Example>& split) {
    for (const Example& e : split) {
      for (int t : e.tokens) os << t << ' ';
      os << e.label << '\n';
    }
  };
  rows(ds.train);
  rows(ds.val);
  rows(ds.test);
}

inline void write_dataset_file(const std::string& path, const Dataset& ds) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  write_dataset(f, ds);
  if (!f.good()) throw IoError("write failed for '" + path + "'");
}

inline Dataset read_dataset(std::istream& is) {
  Dataset ds;
  size_t n_train = 0, n_val = 0, n_test = 0;
  if (!(is >> ds.task_id >> n_train >> n_val >> n_test >> ds.num_classes >> ds.seq_len >>
        ds.vocab_size >> ds.seed)) {
    throw IoError("dataset header malformed");
  }
  auto read_split = [&](std::vector<Example>& split, size_t n) {
    for (size_t i = 0; i < n; ++i) {
      Example e;
      e.tokens.resize(static_cast<size_t>(ds.seq_len));
      for (int t = 0; t < ds.seq_len; ++t) {
        if (!(is >> e.tokens[static_cast<size_t>(t)])) throw IoError("dataset row truncated");
      }
      if (!(is >> e.label)) throw IoError("dataset row missing label");
      split.push_back(std::move(e));
    }
  };
  read_split(ds.train, n_train);
  read_split(ds.val, n_val);
  read_split(ds.test, n_test);
  return ds;
}

inline Dataset read_dataset_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open '" + path + "'");
  return read_dataset(f);
}

}  // namespace sparseadapt
