#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sparseadapt/errors.hpp"

namespace sparseadapt {

struct Example {
  std::vector<int> tokens;
  int label = 0;

  bool operator==(const Example&) const = default;
};

/// One task's data: three disjoint splits of (token sequence, label) pairs.
struct Dataset {
  std::string task_id;
  uint64_t seed = 0;
  int num_classes = 0;
  int seq_len = 0;
  int vocab_size = 0;
  std::vector<Example> train;
  std::vector<Example> val;
  std::vector<Example> test;
};

/// Flattened minibatch: tokens is batch_size*seq_len ids, labels one per example.
struct Batch {
  int batch_size = 0;
  int seq_len = 0;
  std::vector<int> tokens;
  std::vector<int> labels;
};

inline Batch make_batch(const std::vector<Example>& examples, const std::vector<size_t>& order,
                        size_t begin, size_t end) {
  if (begin >= end || end > order.size()) throw InputError("make_batch: bad range");
  Batch b;
  b.batch_size = static_cast<int>(end - begin);
  b.seq_len = static_cast<int>(examples[order[begin]].tokens.size());
  b.tokens.reserve(static_cast<size_t>(b.batch_size) * b.seq_len);
  b.labels.reserve(static_cast<size_t>(b.batch_size));
  for (size_t i = begin; i < end; ++i) {
    const Example& e = examples[order[i]];
    if (static_cast<int>(e.tokens.size()) != b.seq_len) {
      throw InputError("make_batch: ragged sequence lengths");
    }
    b.tokens.insert(b.tokens.end(), e.tokens.begin(), e.tokens.end());
    b.labels.push_back(e.label);
  }
  return b;
}

inline Batch make_batch(const std::vector<Example>& examples) {
  std::vector<size_t> order(examples.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  return make_batch(examples, order, 0, order.size());
}

}  // namespace sparseadapt
