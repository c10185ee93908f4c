#include "stagformer/attention.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>

#include "stagformer/errors.hpp"

namespace stagformer {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using StridedConst = Eigen::Map<const RowMatrix, 0, Eigen::OuterStride<>>;
using Strided = Eigen::Map<RowMatrix, 0, Eigen::OuterStride<>>;
using DenseMap = Eigen::Map<RowMatrix>;

std::atomic<MaskFault> g_mask_fault{MaskFault::kNone};

std::size_t checked_head_dim(std::size_t width, std::size_t heads) {
  if (heads == 0 || width % heads != 0) {
    throw DimensionError("attention width " + std::to_string(width) + " not divisible into " +
                         std::to_string(heads) + " heads");
  }
  return width / heads;
}

Tensor row_tensor(std::span<const double> x) {
  return Tensor({1, x.size()}, std::vector<double>(x.begin(), x.end()));
}

}  // namespace

// ---- masks --------------------------------------------------------------------

AttentionMask::AttentionMask(std::size_t query_len, std::size_t key_len)
    : query_len_(query_len), key_len_(key_len), bits_(query_len * key_len, 0) {}

std::size_t AttentionMask::row_count(std::size_t q) const {
  return static_cast<std::size_t>(
      std::count(bits_.begin() + static_cast<std::ptrdiff_t>(q * key_len_),
                 bits_.begin() + static_cast<std::ptrdiff_t>((q + 1) * key_len_), std::uint8_t{1}));
}

std::size_t AttentionMask::allowed_count() const {
  return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
}

std::size_t AttentionMask::count_non_strict(std::size_t first_query) const {
  std::size_t violations = 0;
  for (std::size_t q = 0; q < query_len_; ++q) {
    for (std::size_t k = first_query + q; k < key_len_; ++k) violations += allowed(q, k) ? 1 : 0;
  }
  return violations;
}

AttentionMask causal_mask_rows(std::size_t first_query, std::size_t nq, std::size_t nk) {
  AttentionMask mask(nq, nk);
  for (std::size_t r = 0; r < nq; ++r) {
    const std::size_t i = first_query + r;
    for (std::size_t j = 0; j < nk && j <= i; ++j) mask.set(r, j, true);
  }
  return mask;
}

AttentionMask staggered_mask_rows(std::size_t first_query, std::size_t nq, std::size_t nk,
                                  std::optional<std::size_t> window) {
  if (window && *window == 0) throw ConfigError("cross_window must be >= 1");
  const bool diagonal = mask_fault() == MaskFault::kDiagonalAllowed;
  AttentionMask mask(nq, nk);
  for (std::size_t r = 0; r < nq; ++r) {
    const std::size_t i = first_query + r;
    const std::size_t last = diagonal ? i + 1 : i;  // exclusive bound
    std::size_t first = 0;
    if (window && i > *window) first = i - *window;
    for (std::size_t j = first; j < last && j < nk; ++j) mask.set(r, j, true);
  }
  return mask;
}

AttentionMask build_causal_mask(std::size_t n) {
  if (n == 0) throw ConfigError("mask length must be >= 1");
  return causal_mask_rows(0, n, n);
}

AttentionMask build_staggered_mask(std::size_t nq, std::size_t nk, std::optional<std::size_t> window) {
  if (nq == 0 || nk == 0) throw ConfigError("mask lengths must be >= 1");
  return staggered_mask_rows(0, nq, nk, window);
}

void set_mask_fault(MaskFault fault) noexcept { g_mask_fault.store(fault); }
MaskFault mask_fault() noexcept { return g_mask_fault.load(); }

// ---- RoPE -----------------------------------------------------------------------

void RopeParams::validate() const {
  if (head_dim == 0 || head_dim % 2 != 0) {
    throw ConfigError("rope head_dim must be even and positive, got " + std::to_string(head_dim));
  }
  if (!(base > 0.0)) throw ConfigError("rope base must be positive");
}

namespace {

// angle sign +1 rotates forward, -1 applies the inverse rotation.
void rotate(std::span<double> row, std::size_t position, const RopeParams& params, double sign) {
  const std::size_t hd = params.head_dim;
  const auto pos = static_cast<double>(position);
  for (std::size_t t = 0; 2 * t < hd; ++t) {
    const double angle = pos * std::pow(params.base, -2.0 * static_cast<double>(t) / static_cast<double>(hd));
    const double c = std::cos(angle), s = sign * std::sin(angle);
    for (std::size_t offset = 0; offset < row.size(); offset += hd) {
      double& x0 = row[offset + 2 * t];
      double& x1 = row[offset + 2 * t + 1];
      const double a = x0, b = x1;
      x0 = a * c - b * s;
      x1 = a * s + b * c;
    }
  }
}

}  // namespace

void rope_rotate_row(std::span<double> row, std::size_t position, const RopeParams& params) {
  params.validate();
  if (row.size() % params.head_dim != 0) throw DimensionError("rope: row width not a multiple of head_dim");
  rotate(row, position, params, 1.0);
}

Tensor apply_rope(const Tensor& x, std::span<const std::size_t> positions, const RopeParams& params) {
  params.validate();
  const std::size_t width = x.cols(), rows = x.rows();
  if (width % params.head_dim != 0) throw DimensionError("rope: row width not a multiple of head_dim");
  if (positions.size() != rows) {
    throw DimensionError("rope: " + std::to_string(positions.size()) + " positions for " + std::to_string(rows) +
                         " rows");
  }
  Tensor out = x.detach();
  auto dst = out.mutable_data();
  for (std::size_t r = 0; r < rows; ++r) rotate(dst.subspan(r * width, width), positions[r], params, 1.0);
  if (autograd::should_record({&x})) {
    std::vector<std::size_t> pos(positions.begin(), positions.end());
    autograd::record(out, [x, out, pos = std::move(pos), params, width, rows]() mutable {
      if (!out.has_grad()) return;
      std::vector<double> g(out.grad().begin(), out.grad().end());
      for (std::size_t r = 0; r < rows; ++r) {
        rotate(std::span<double>(g).subspan(r * width, width), pos[r], params, -1.0);
      }
      autograd::accumulate(x, g);
    });
  }
  return out;
}

// ---- attention ------------------------------------------------------------------

void attention_forward(std::span<const double> q, std::span<const double> k, std::span<const double> v,
                       const AttentionMask& mask, double scale, std::size_t heads, std::size_t batch,
                       std::size_t width, std::span<double> out, double* probs) {
  const std::size_t hd = checked_head_dim(width, heads);
  const std::size_t nq = mask.query_len(), nk = mask.key_len();
  if (q.size() != batch * nq * width || k.size() != batch * nk * width || v.size() != k.size() ||
      out.size() != q.size()) {
    throw DimensionError("attention: mask " + std::to_string(nq) + "x" + std::to_string(nk) +
                         " does not match query/key extents");
  }
  std::fill(out.begin(), out.end(), 0.0);
  if (nk == 0) {
    if (probs != nullptr) std::fill_n(probs, batch * heads * nq * nk, 0.0);
    return;
  }
  count_macs(2ULL * batch * heads * nq * nk * hd);
  RowMatrix scores(nq, nk);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      StridedConst qh(q.data() + b * nq * width + h * hd, nq, hd, Eigen::OuterStride<>(width));
      StridedConst kh(k.data() + b * nk * width + h * hd, nk, hd, Eigen::OuterStride<>(width));
      StridedConst vh(v.data() + b * nk * width + h * hd, nk, hd, Eigen::OuterStride<>(width));
      scores.noalias() = qh * kh.transpose();
      for (std::size_t i = 0; i < nq; ++i) {
        double peak = kMaskedLogit;
        bool any = false;
        for (std::size_t j = 0; j < nk; ++j) {
          double& s = scores(i, j);
          s *= scale;
          if (mask.allowed(i, j)) {
            any = true;
            peak = std::max(peak, s);
          } else {
            s += kMaskedLogit;
          }
        }
        if (!any) {
          scores.row(i).setZero();
          continue;
        }
        double total = 0.0;
        for (std::size_t j = 0; j < nk; ++j) {
          scores(i, j) = std::exp(scores(i, j) - peak);
          total += scores(i, j);
        }
        scores.row(i) /= total;
      }
      Strided oh(out.data() + b * nq * width + h * hd, nq, hd, Eigen::OuterStride<>(width));
      oh.noalias() = scores * vh;
      if (probs != nullptr) {
        DenseMap(probs + (b * heads + h) * nq * nk, nq, nk) = scores;
      }
    }
  }
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionMask& mask, double scale,
                 HeadLayout layout) {
  const std::size_t width = q.cols();
  if (k.cols() != width || v.cols() != width || k.rows() != v.rows()) {
    throw DimensionError("attention: q/k/v widths differ: " + shape_to_string(q.shape()) + ", " +
                         shape_to_string(k.shape()) + ", " + shape_to_string(v.shape()));
  }
  if (q.rows() != layout.batch * mask.query_len() || k.rows() != layout.batch * mask.key_len()) {
    throw DimensionError("attention: mask " + std::to_string(mask.query_len()) + "x" +
                         std::to_string(mask.key_len()) + " does not match q " + shape_to_string(q.shape()) +
                         " / k " + shape_to_string(k.shape()));
  }
  const bool record = autograd::should_record({&q, &k, &v});
  Tensor out({q.rows(), width});
  std::vector<double> probs;
  if (record) probs.resize(layout.batch * layout.heads * mask.query_len() * mask.key_len());
  attention_forward(q.data(), k.data(), v.data(), mask, scale, layout.heads, layout.batch, width,
                    out.mutable_data(), record ? probs.data() : nullptr);
  if (record) {
    autograd::record(out, [q, k, v, out, probs = std::move(probs), nq = mask.query_len(), nk = mask.key_len(), scale,
                           layout, width]() mutable {
      if (!out.has_grad() || nk == 0) return;
      const std::size_t hd = width / layout.heads;
      auto dq = q.requires_grad() ? q.mutable_grad() : std::span<double>();
      auto dk = k.requires_grad() ? k.mutable_grad() : std::span<double>();
      auto dv = v.requires_grad() ? v.mutable_grad() : std::span<double>();
      auto go = out.grad();
      RowMatrix dp(nq, nk), ds(nq, nk);
      for (std::size_t b = 0; b < layout.batch; ++b) {
        for (std::size_t h = 0; h < layout.heads; ++h) {
          const std::size_t qoff = b * nq * width + h * hd, koff = b * nk * width + h * hd;
          DenseMap p(probs.data() + (b * layout.heads + h) * nq * nk, nq, nk);
          StridedConst doh(go.data() + qoff, nq, hd, Eigen::OuterStride<>(width));
          StridedConst qh(q.data().data() + qoff, nq, hd, Eigen::OuterStride<>(width));
          StridedConst kh(k.data().data() + koff, nk, hd, Eigen::OuterStride<>(width));
          StridedConst vh(v.data().data() + koff, nk, hd, Eigen::OuterStride<>(width));
          if (!dv.empty()) {
            Strided(dv.data() + koff, nk, hd, Eigen::OuterStride<>(width)).noalias() += p.transpose() * doh;
          }
          dp.noalias() = doh * vh.transpose();
          ds = p.cwiseProduct(dp);
          const Eigen::VectorXd row_dot = ds.rowwise().sum();
          ds -= p.cwiseProduct(row_dot.replicate(1, static_cast<Eigen::Index>(nk)));
          if (!dq.empty()) {
            Strided(dq.data() + qoff, nq, hd, Eigen::OuterStride<>(width)).noalias() += scale * (ds * kh);
          }
          if (!dk.empty()) {
            Strided(dk.data() + koff, nk, hd, Eigen::OuterStride<>(width)).noalias() +=
                scale * (ds.transpose() * qh);
          }
        }
      }
    });
  }
  return out;
}

// ---- caches ---------------------------------------------------------------------

void KVCache::append(std::span<const double> key, std::span<const double> value) {
  if (key.size() != width_ || value.size() != width_) {
    throw DimensionError("kv cache append: expected width " + std::to_string(width_));
  }
  keys_.insert(keys_.end(), key.begin(), key.end());
  values_.insert(values_.end(), value.begin(), value.end());
  ++length_;
}

KVCacheCounts& KVCacheCounts::operator+=(const KVCacheCounts& other) {
  self_caches += other.self_caches;
  cross_caches += other.cross_caches;
  self_entries += other.self_entries;
  cross_entries += other.cross_entries;
  return *this;
}

KVCacheCounts kv_cache_entry_count(const KVCacheSet& caches) {
  KVCacheCounts counts;
  counts.self_caches = caches.self.size();
  counts.cross_caches = caches.cross.size();
  for (const KVCache& c : caches.self) counts.self_entries += c.length();
  for (const KVCache& c : caches.cross) counts.cross_entries += c.length();
  return counts;
}

// ---- blocks ---------------------------------------------------------------------

namespace {

void capture_rows(KVCache* capture, const Tensor& keys, const Tensor& values) {
  if (capture == nullptr) return;
  for (std::size_t r = 0; r < keys.rows(); ++r) capture->append(keys.row(r), values.row(r));
}

double attention_scale(const BlockGeometry& geometry) {
  return 1.0 / std::sqrt(static_cast<double>(geometry.rope.head_dim));
}

}  // namespace

Tensor self_attention_block(const Tensor& x, const AttentionProjections& w, const AttentionMask& mask,
                            const BlockGeometry& geometry, std::span<const std::size_t> positions,
                            KVCache* capture) {
  if (capture != nullptr && geometry.batch != 1) throw StateError("cache capture requires batch 1");
  Tensor q = apply_rope(matmul(x, w.query), positions, geometry.rope);
  Tensor k = apply_rope(matmul(x, w.key), positions, geometry.rope);
  Tensor v = matmul(x, w.value);
  capture_rows(capture, k, v);
  Tensor mixed = attention(q, k, v, mask, attention_scale(geometry), {geometry.heads, geometry.batch});
  return matmul(mixed, w.output);
}

Tensor cross_attention_block(const Tensor& x, const Tensor& source, const AttentionProjections& w,
                             const AttentionMask& mask, const BlockGeometry& geometry,
                             std::span<const std::size_t> query_positions,
                             std::span<const std::size_t> source_positions, KVCache* capture) {
  if (capture != nullptr && geometry.batch != 1) throw StateError("cache capture requires batch 1");
  Tensor q = apply_rope(matmul(x, w.query), query_positions, geometry.rope);
  Tensor k = apply_rope(matmul(source, w.key), source_positions, geometry.rope);
  Tensor v = matmul(source, w.value);
  capture_rows(capture, k, v);
  Tensor mixed = attention(q, k, v, mask, attention_scale(geometry), {geometry.heads, geometry.batch});
  return matmul(mixed, w.output);
}

std::vector<double> self_attention_step(std::span<const double> x, const AttentionProjections& w, KVCache& cache,
                                        std::size_t position, const BlockGeometry& geometry) {
  if (cache.length() != position) {
    throw StateError("self cache holds " + std::to_string(cache.length()) + " entries but query is at position " +
                     std::to_string(position));
  }
  NoGradGuard no_grad;
  const Tensor row = row_tensor(x);
  Tensor q = matmul(row, w.query);
  Tensor k = matmul(row, w.key);
  Tensor v = matmul(row, w.value);
  rope_rotate_row(q.mutable_data(), position, geometry.rope);
  rope_rotate_row(k.mutable_data(), position, geometry.rope);
  cache.append(k.data(), v.data());
  const AttentionMask mask = causal_mask_rows(position, 1, cache.length());
  Tensor mixed({1, x.size()});
  attention_forward(q.data(), cache.keys(), cache.values(), mask, attention_scale(geometry), geometry.heads, 1,
                    x.size(), mixed.mutable_data(), nullptr);
  Tensor out = matmul(mixed, w.output);
  return {out.data().begin(), out.data().end()};
}

std::vector<double> cross_attention_step(std::span<const double> x, const AttentionProjections& w,
                                         const KVCache& cache, std::size_t position,
                                         std::optional<std::size_t> window, const BlockGeometry& geometry) {
  if (cache.length() != position) {
    throw StateError("cross cache holds " + std::to_string(cache.length()) +
                     " source entries but query is at position " + std::to_string(position));
  }
  NoGradGuard no_grad;
  Tensor q = matmul(row_tensor(x), w.query);
  rope_rotate_row(q.mutable_data(), position, geometry.rope);
  const AttentionMask mask = staggered_mask_rows(position, 1, cache.length(), window);
  Tensor mixed({1, x.size()});
  attention_forward(q.data(), cache.keys(), cache.values(), mask, attention_scale(geometry), geometry.heads, 1,
                    x.size(), mixed.mutable_data(), nullptr);
  Tensor out = matmul(mixed, w.output);
  return {out.data().begin(), out.data().end()};
}

void append_cross_source(std::span<const double> source, const AttentionProjections& w, KVCache& cache,
                         std::size_t source_position, const BlockGeometry& geometry) {
  if (cache.length() != source_position) {
    throw StateError("cross cache holds " + std::to_string(cache.length()) + " entries, cannot publish position " +
                     std::to_string(source_position));
  }
  NoGradGuard no_grad;
  const Tensor row = row_tensor(source);
  Tensor k = matmul(row, w.key);
  Tensor v = matmul(row, w.value);
  rope_rotate_row(k.mutable_data(), source_position, geometry.rope);
  cache.append(k.data(), v.data());
}

}  // namespace stagformer
