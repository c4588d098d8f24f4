#include "advcl/moco.hpp"

#include <cmath>
#include <random>

namespace advcl {

MomentumPair MomentumPair::from_initial(const EncoderBundle& init, double momentum) {
  if (!(momentum >= 0.0 && momentum <= 1.0)) throw ConfigError("momentum must be in [0, 1]");
  return MomentumPair{clone_parameters(init), clone_parameters(init), momentum};
}

void momentum_update(EncoderBundle& key, const EncoderBundle& query, double m) {
  if (!(key.config() == query.config())) throw ContractError("momentum_update: architecture mismatch");
  auto k = key.params();
  const auto q = query.params();
  const double w = 1.0 - m;
  for (std::size_t i = 0; i < k.size(); ++i) k[i] = m * k[i] + w * q[i];
}

void momentum_update(MomentumPair& pair) { momentum_update(pair.key, pair.query, pair.m); }

NegativeQueue::NegativeQueue(int capacity, int dim) {
  if (capacity < 1 || dim < 1) throw ConfigError("queue capacity and dim must be positive");
  buf_ = Mat::Zero(capacity, dim);
}

void NegativeQueue::enqueue(const Mat& z) {
  if (z.rows() > capacity()) {
    throw ConfigError("batch of " + std::to_string(z.rows()) + " exceeds queue capacity " +
                      std::to_string(capacity()));
  }
  if (z.cols() != dim()) throw ContractError("enqueue: dimension mismatch");
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    buf_.row(cursor_) = z.row(r);
    cursor_ = (cursor_ + 1) % capacity();
    if (size_ < capacity()) ++size_;
  }
}

Mat NegativeQueue::entries() const {
  Mat out(size_, dim());
  const int start = size_ < capacity() ? 0 : cursor_;
  for (int i = 0; i < size_; ++i) out.row(i) = buf_.row((start + i) % capacity());
  return out;
}

std::vector<double> NegativeQueue::raw() const { return {buf_.data(), buf_.data() + buf_.size()}; }

NegativeQueue NegativeQueue::restore(int capacity, int dim, std::vector<double> raw, int size, int cursor) {
  NegativeQueue q(capacity, dim);
  if (raw.size() != static_cast<std::size_t>(capacity) * static_cast<std::size_t>(dim) || size < 0 ||
      size > capacity || cursor < 0 || cursor >= capacity) {
    throw ConfigError("queue restore: inconsistent state");
  }
  q.buf_ = Eigen::Map<Mat>(raw.data(), capacity, dim);
  q.size_ = size;
  q.cursor_ = cursor;
  return q;
}

InfoNce infonce(const RowVec& z, const RowVec& z_pos, const Eigen::Ref<const Mat>& keys, double tau) {
  if (!(tau > 0.0)) throw ContractError("temperature must be positive");
  if (keys.rows() == 0) throw ContractError("InfoNCE needs a non-empty queue");
  const Vec logits = (keys * z.transpose()) / tau;
  const double mx = logits.maxCoeff();
  const Vec e = (logits.array() - mx).exp();
  const double sum = e.sum();
  InfoNce out;
  out.loss = std::log(sum) + (mx - z.dot(z_pos) / tau);
  const Vec p = e / sum;
  out.grad_z = (keys.transpose() * p - z_pos.transpose()) / tau;
  return out;
}

double infonce_loss(const RowVec& z, const RowVec& z_pos, const NegativeQueue& queue, double tau) {
  return infonce(z, z_pos, queue.storage(), tau).loss;
}

double contrastive_batch_loss(const MomentumPair& pair, NegativeQueue& queue,
                              std::span<const TokenizedExample> batch,
                              std::span<const TokenizedExample> positives, double tau) {
  if (batch.size() != positives.size()) throw ContractError("positives must align with the batch");
  const Mat zq = encode(pair.query, batch).z;
  const Mat zk = encode(pair.key, positives).z;
  queue.enqueue(zk);
  double total = 0.0;
  for (Eigen::Index i = 0; i < zq.rows(); ++i) total += infonce(zq.row(i), zk.row(i), queue.storage(), tau).loss;
  return total / static_cast<double>(zq.rows());
}

void fill_queue(NegativeQueue& queue, const EncoderBundle& key, std::span<const TokenizedExample> examples,
                std::uint64_t seed, int batch) {
  if (examples.empty()) throw ContractError("fill_queue: no examples");
  std::mt19937_64 rng(mix_seed(seed, "queue-fill"));
  std::uniform_int_distribution<std::size_t> pick(0, examples.size() - 1);
  const int want = queue.capacity();
  int filled = 0;
  while (filled < want) {
    const int n = std::min(batch, want - filled);
    std::vector<TokenizedExample> chunk;
    chunk.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) chunk.push_back(examples[pick(rng)]);
    queue.enqueue(encode(key, chunk).z);
    filled += n;
  }
}

}  // namespace advcl
