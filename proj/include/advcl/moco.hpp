#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "advcl/common.hpp"
#include "advcl/corpus.hpp"
#include "advcl/encoder.hpp"

namespace advcl {

// Query encoder (trained by gradient) and key encoder (moved only by the
// momentum rule). Both start from the same parameters.
struct MomentumPair {
  EncoderBundle query;
  EncoderBundle key;
  double m = 0.999;

  static MomentumPair from_initial(const EncoderBundle& init, double momentum);
};

// key <- m * key + (1 - m) * query, elementwise over every parameter.
void momentum_update(EncoderBundle& key, const EncoderBundle& query, double m);
void momentum_update(MomentumPair& pair);

// Fixed-capacity FIFO of projected vectors backed by a ring buffer.
class NegativeQueue {
 public:
  NegativeQueue(int capacity, int dim);

  // Appends the rows of `z`, evicting the oldest entries beyond capacity.
  void enqueue(const Mat& z);

  int size() const { return size_; }
  int capacity() const { return static_cast<int>(buf_.rows()); }
  int dim() const { return static_cast<int>(buf_.cols()); }
  int cursor() const { return cursor_; }
  bool empty() const { return size_ == 0; }

  // Entries oldest -> newest.
  Mat entries() const;
  // The occupied rows in storage order (the loss does not depend on order).
  Eigen::Ref<const Mat> storage() const { return buf_.topRows(size_); }

  std::vector<double> raw() const;
  static NegativeQueue restore(int capacity, int dim, std::vector<double> raw, int size, int cursor);

 private:
  Mat buf_;
  int size_ = 0;
  int cursor_ = 0;  // next write position
};

struct InfoNce {
  double loss = 0.0;
  Vec grad_z;  // d loss / d z
};

// -log( exp(z.z_pos/tau) / sum_k exp(z.z_k/tau) ) over the rows of `keys`,
// evaluated in log-sum-exp form. z_pos is expected to be one of the rows.
InfoNce infonce(const RowVec& z, const RowVec& z_pos, const Eigen::Ref<const Mat>& keys, double tau);
double infonce_loss(const RowVec& z, const RowVec& z_pos, const NegativeQueue& queue, double tau);

// Encodes `batch` with the query branch and `positives` with the key branch,
// enqueues the key outputs, then returns the mean InfoNCE loss against the
// updated queue.
double contrastive_batch_loss(const MomentumPair& pair, NegativeQueue& queue,
                              std::span<const TokenizedExample> batch,
                              std::span<const TokenizedExample> positives, double tau);

// Fills the queue with key-branch projections of randomly drawn examples.
void fill_queue(NegativeQueue& queue, const EncoderBundle& key,
                std::span<const TokenizedExample> examples, std::uint64_t seed, int batch = 64);

}  // namespace advcl
