#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "stagformer/tensor.hpp"

namespace stagformer {

// Logit offset applied to disallowed query/key pairs before the softmax.
inline constexpr double kMaskedLogit = -1e30;

// Boolean query x key matrix. Positions are 0-based; query row r stands for
// absolute position first_query + r, key column j for absolute position j.
class AttentionMask {
 public:
  AttentionMask(std::size_t query_len, std::size_t key_len);

  std::size_t query_len() const noexcept { return query_len_; }
  std::size_t key_len() const noexcept { return key_len_; }
  bool allowed(std::size_t q, std::size_t k) const { return bits_[q * key_len_ + k] != 0; }
  void set(std::size_t q, std::size_t k, bool value) { bits_[q * key_len_ + k] = value ? 1 : 0; }

  std::size_t row_count(std::size_t q) const;
  std::size_t allowed_count() const;
  // Pairs whose key position is >= the query's absolute position.
  std::size_t count_non_strict(std::size_t first_query = 0) const;

 private:
  std::size_t query_len_;
  std::size_t key_len_;
  std::vector<std::uint8_t> bits_;
};

// allowed(i, j) <=> j <= i.
AttentionMask build_causal_mask(std::size_t n);
// allowed(i, j) <=> j <= i - 1 and (no window or j >= i - window).
AttentionMask build_staggered_mask(std::size_t nq, std::size_t nk, std::optional<std::size_t> window);
// Rows first_query .. first_query + nq - 1 of the corresponding full masks.
AttentionMask causal_mask_rows(std::size_t first_query, std::size_t nq, std::size_t nk);
AttentionMask staggered_mask_rows(std::size_t first_query, std::size_t nq, std::size_t nk,
                                  std::optional<std::size_t> window);

// Deliberate mask corruption used by mutation tests of the verification suites.
enum class MaskFault { kNone, kDiagonalAllowed };
void set_mask_fault(MaskFault fault) noexcept;
MaskFault mask_fault() noexcept;

class ScopedMaskFault {
 public:
  explicit ScopedMaskFault(MaskFault fault) : previous_(mask_fault()) { set_mask_fault(fault); }
  ~ScopedMaskFault() { set_mask_fault(previous_); }
  ScopedMaskFault(const ScopedMaskFault&) = delete;
  ScopedMaskFault& operator=(const ScopedMaskFault&) = delete;

 private:
  MaskFault previous_;
};

struct RopeParams {
  std::size_t head_dim = 0;
  double base = 10000.0;

  void validate() const;
};

// Rotates dims (2t, 2t+1) of every head by position * base^(-2t / head_dim).
// x is [rows x heads*head_dim]; positions has one entry per row.
Tensor apply_rope(const Tensor& x, std::span<const std::size_t> positions, const RopeParams& params);
// In-place rotation of one row, shared by the incremental decode path.
void rope_rotate_row(std::span<double> row, std::size_t position, const RopeParams& params);

struct HeadLayout {
  std::size_t heads = 1;
  // Independent sequences stacked along rows; the mask applies to each.
  std::size_t batch = 1;
};

// Scaled dot-product attention over allowed keys only. q is [batch*nq x D],
// k and v are [batch*nk x D], D = heads * head_dim. A query row without any
// allowed key produces a zero vector.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionMask& mask, double scale,
                 HeadLayout layout = {});

// Raw kernel used by both the differentiable op and the cached decode path.
// probs, when non-null, receives batch*heads*nq*nk softmax weights.
void attention_forward(std::span<const double> q, std::span<const double> k, std::span<const double> v,
                       const AttentionMask& mask, double scale, std::size_t heads, std::size_t batch,
                       std::size_t width, std::span<double> out, double* probs);

// ---- caches -----------------------------------------------------------------

enum class CacheKind { kSelf, kCross };

// Keys (post-RoPE) and values of one attention layer, one row per position.
class KVCache {
 public:
  KVCache(CacheKind kind, std::size_t width) : kind_(kind), width_(width) {}

  void append(std::span<const double> key, std::span<const double> value);
  std::size_t length() const noexcept { return length_; }
  std::size_t width() const noexcept { return width_; }
  CacheKind kind() const noexcept { return kind_; }
  std::span<const double> keys() const noexcept { return keys_; }
  std::span<const double> values() const noexcept { return values_; }
  std::span<double> mutable_keys() noexcept { return keys_; }
  std::span<double> mutable_values() noexcept { return values_; }

 private:
  CacheKind kind_;
  std::size_t width_;
  std::size_t length_ = 0;
  std::vector<double> keys_;
  std::vector<double> values_;
};

struct KVCacheCounts {
  std::size_t self_caches = 0;
  std::size_t cross_caches = 0;
  std::size_t self_entries = 0;
  std::size_t cross_entries = 0;

  std::size_t total_caches() const noexcept { return self_caches + cross_caches; }
  KVCacheCounts& operator+=(const KVCacheCounts& other);
};

// Caches owned by one stack (or one recurrent pass): a self cache per layer
// and, for layers with cross-attention, a cross cache per layer.
struct KVCacheSet {
  std::vector<KVCache> self;
  std::vector<KVCache> cross;
};

KVCacheCounts kv_cache_entry_count(const KVCacheSet& caches);

// ---- multi-head blocks --------------------------------------------------------

struct AttentionProjections {
  Tensor query;   // [d x d]
  Tensor key;     // [d x d]
  Tensor value;   // [d x d]
  Tensor output;  // [d x d]
};

struct BlockGeometry {
  std::size_t heads = 1;
  std::size_t batch = 1;
  RopeParams rope;
};

// Teacher-forced self-attention over a full [batch*n x d] input. When capture
// is non-null (batch must be 1) the post-RoPE keys and values are appended.
Tensor self_attention_block(const Tensor& x, const AttentionProjections& w, const AttentionMask& mask,
                            const BlockGeometry& geometry, std::span<const std::size_t> positions,
                            KVCache* capture = nullptr);

// Teacher-forced cross-attention from x onto an already normalized source.
Tensor cross_attention_block(const Tensor& x, const Tensor& source, const AttentionProjections& w,
                             const AttentionMask& mask, const BlockGeometry& geometry,
                             std::span<const std::size_t> query_positions,
                             std::span<const std::size_t> source_positions, KVCache* capture = nullptr);

// Incremental self-attention for one query at `position`; appends exactly
// one entry. Requires cache.length() == position.
std::vector<double> self_attention_step(std::span<const double> x, const AttentionProjections& w, KVCache& cache,
                                        std::size_t position, const BlockGeometry& geometry);

// Incremental cross-attention for one query at `position` over the source
// entries already in `cache`. Requires cache.length() == position.
std::vector<double> cross_attention_step(std::span<const double> x, const AttentionProjections& w,
                                         const KVCache& cache, std::size_t position,
                                         std::optional<std::size_t> window, const BlockGeometry& geometry);

// Projects one normalized source row published at `source_position` and
// appends its key/value to a cross cache.
void append_cross_source(std::span<const double> source, const AttentionProjections& w, KVCache& cache,
                         std::size_t source_position, const BlockGeometry& geometry);

}  // namespace stagformer
