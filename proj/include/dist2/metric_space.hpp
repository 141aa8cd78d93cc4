#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "numeric.hpp"

namespace dist2 {

using TokenId = int;

/// Ordered subset V_d of the full vocabulary, optionally carrying a scalar
/// value per token (digits, bins, ...).
class VocabSubset {
 public:
  VocabSubset(std::size_t vocab_size, std::vector<TokenId> token_ids,
              std::optional<std::vector<double>> values = std::nullopt)
      : vocab_size_(vocab_size), token_ids_(std::move(token_ids)), values_(std::move(values)),
        index_(vocab_size, -1) {
    require(token_ids_.size() >= 2, ErrorKind::domain, "vocabulary subset needs at least 2 tokens");
    for (std::size_t i = 0; i < token_ids_.size(); ++i) {
      const TokenId t = token_ids_[i];
      require(t >= 0 && static_cast<std::size_t>(t) < vocab_size_, ErrorKind::domain,
              "token id " + std::to_string(t) + " outside vocabulary");
      require(index_[static_cast<std::size_t>(t)] < 0, ErrorKind::domain,
              "duplicate token id " + std::to_string(t));
      index_[static_cast<std::size_t>(t)] = static_cast<int>(i);
    }
    if (values_) {
      require(values_->size() == token_ids_.size(), ErrorKind::domain,
              "value map must cover every subset token");
      std::vector<double> sorted = *values_;
      std::sort(sorted.begin(), sorted.end());
      require(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end(), ErrorKind::domain,
              "value map must be injective");
      require(all_finite(sorted), ErrorKind::domain, "value map must be finite");
    }
  }

  /// Tokens 0..m-1 of a vocabulary of size vocab_size, values equal to ids.
  static VocabSubset iota(std::size_t vocab_size, std::size_t m, bool with_values = true) {
    std::vector<TokenId> ids(m);
    std::iota(ids.begin(), ids.end(), 0);
    std::optional<std::vector<double>> vals;
    if (with_values) vals = std::vector<double>(ids.begin(), ids.end());
    return VocabSubset(vocab_size, std::move(ids), std::move(vals));
  }

  std::size_t size() const noexcept { return token_ids_.size(); }
  std::size_t vocab_size() const noexcept { return vocab_size_; }
  const std::vector<TokenId>& token_ids() const noexcept { return token_ids_; }
  TokenId token(std::size_t i) const { return token_ids_.at(i); }
  bool has_values() const noexcept { return values_.has_value(); }
  const std::vector<double>& values() const {
    require(values_.has_value(), ErrorKind::domain, "subset has no value map");
    return *values_;
  }

  bool contains(TokenId t) const noexcept {
    return t >= 0 && static_cast<std::size_t>(t) < vocab_size_ && index_[static_cast<std::size_t>(t)] >= 0;
  }

  /// Position of token t inside the subset.
  std::size_t index_of(TokenId t) const {
    require(contains(t), ErrorKind::domain, "token " + std::to_string(t) + " not in subset");
    return static_cast<std::size_t>(index_[static_cast<std::size_t>(t)]);
  }

  double value(TokenId t) const { return values()[index_of(t)]; }

 private:
  std::size_t vocab_size_;
  std::vector<TokenId> token_ids_;
  std::optional<std::vector<double>> values_;
  std::vector<int> index_;
};

/// Fixed embedding vectors, one row per subset token.
class EmbeddingTable {
 public:
  EmbeddingTable(std::size_t rows, std::size_t dim, std::vector<double> data)
      : rows_(rows), dim_(dim), data_(std::move(data)) {
    require(dim_ > 0, ErrorKind::domain, "embedding dimension must be positive");
    require(data_.size() == rows_ * dim_, ErrorKind::shape, "embedding data size mismatch");
    require(all_finite(data_), ErrorKind::domain, "embedding components must be finite");
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t dim() const noexcept { return dim_; }
  std::span<const double> row(std::size_t i) const { return {data_.data() + i * dim_, dim_}; }
  const std::vector<double>& data() const noexcept { return data_; }

  /// Content hash over the on-disk (float32) representation.
  std::uint64_t content_hash() const { return fnv1a(to_bytes()); }

  std::string to_bytes() const {
    std::string out;
    out.reserve(8 + data_.size() * 4);
    put_u32(out, static_cast<std::uint32_t>(rows_));
    put_u32(out, static_cast<std::uint32_t>(dim_));
    for (double x : data_) {
      const float f = static_cast<float>(x);
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      put_u32(out, bits);
    }
    return out;
  }

  static EmbeddingTable from_bytes(std::string_view bytes) {
    require(bytes.size() >= 8, ErrorKind::io, "embedding file shorter than header");
    const std::uint32_t m = get_u32(bytes, 0);
    const std::uint32_t d = get_u32(bytes, 4);
    const std::size_t need = 8 + static_cast<std::size_t>(m) * d * 4;
    require(bytes.size() == need, ErrorKind::io,
            "embedding file size " + std::to_string(bytes.size()) + " != expected " + std::to_string(need));
    std::vector<double> data(static_cast<std::size_t>(m) * d);
    for (std::size_t i = 0; i < data.size(); ++i) {
      const std::uint32_t bits = get_u32(bytes, 8 + 4 * i);
      float f;
      std::memcpy(&f, &bits, 4);
      data[i] = static_cast<double>(f);
    }
    return EmbeddingTable(m, d, std::move(data));
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::binary);
    require(static_cast<bool>(os), ErrorKind::io, "cannot open " + path.string());
    const std::string b = to_bytes();
    os.write(b.data(), static_cast<std::streamsize>(b.size()));
  }

  static EmbeddingTable load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    require(static_cast<bool>(is), ErrorKind::io, "cannot open " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return from_bytes(bytes);
  }

  /// Rounds every component through float32 so in-memory tables match what a
  /// save/load cycle produces.
  EmbeddingTable quantized() const { return from_bytes(to_bytes()); }

 private:
  static void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  static std::uint32_t get_u32(std::string_view b, std::size_t off) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b[off + i])) << (8 * i);
    return v;
  }

  std::size_t rows_;
  std::size_t dim_;
  std::vector<double> data_;
};

enum class MetricKind { squared_euclidean_scalar, absolute_scalar, cosine_embedding, mse_embedding };

inline std::string to_string(MetricKind k) {
  switch (k) {
    case MetricKind::squared_euclidean_scalar: return "squared_euclidean_scalar";
    case MetricKind::absolute_scalar: return "absolute_scalar";
    case MetricKind::cosine_embedding: return "cosine_embedding";
    case MetricKind::mse_embedding: return "mse_embedding";
  }
  return "?";
}

inline MetricKind metric_kind_from_string(std::string_view s) {
  if (s == "squared_euclidean_scalar" || s == "squared") return MetricKind::squared_euclidean_scalar;
  if (s == "absolute_scalar" || s == "absolute") return MetricKind::absolute_scalar;
  if (s == "cosine_embedding" || s == "cosine") return MetricKind::cosine_embedding;
  if (s == "mse_embedding" || s == "mse") return MetricKind::mse_embedding;
  throw Error(ErrorKind::config, "unknown metric kind '" + std::string(s) + "'");
}

inline bool is_embedding_kind(MetricKind k) {
  return k == MetricKind::cosine_embedding || k == MetricKind::mse_embedding;
}

/// A distance d over the tokens of a VocabSubset.
class MetricSpec {
 public:
  MetricSpec(MetricKind kind, VocabSubset subset,
             std::shared_ptr<const EmbeddingTable> embeddings = nullptr)
      : kind_(kind), subset_(std::move(subset)), embeddings_(std::move(embeddings)) {
    if (is_embedding_kind(kind_)) {
      require(embeddings_ != nullptr, ErrorKind::domain, "embedding metric requires an embedding table");
      require(embeddings_->rows() == subset_.size(), ErrorKind::shape,
              "embedding rows must equal subset size");
      if (kind_ == MetricKind::cosine_embedding) {
        norms_.resize(subset_.size());
        for (std::size_t i = 0; i < subset_.size(); ++i) {
          double s = 0.0;
          for (double x : embeddings_->row(i)) s += x * x;
          norms_[i] = std::sqrt(s);
        }
      }
    } else {
      require(subset_.has_values(), ErrorKind::domain, "scalar metric requires a value map");
    }
  }

  MetricKind kind() const noexcept { return kind_; }
  const VocabSubset& subset() const noexcept { return subset_; }
  const std::shared_ptr<const EmbeddingTable>& embeddings() const noexcept { return embeddings_; }
  std::size_t size() const noexcept { return subset_.size(); }

  /// Distance between the i-th and j-th subset entries.
  double distance_at(std::size_t i, std::size_t j) const {
    switch (kind_) {
      case MetricKind::squared_euclidean_scalar: {
        const double diff = subset_.values()[i] - subset_.values()[j];
        return diff * diff;
      }
      case MetricKind::absolute_scalar:
        return std::abs(subset_.values()[i] - subset_.values()[j]);
      case MetricKind::cosine_embedding: {
        if (i == j) {
          require(norms_[i] > 0.0, ErrorKind::degenerate_embedding, "zero-norm embedding row");
          return 0.0;
        }
        require(norms_[i] > 0.0 && norms_[j] > 0.0, ErrorKind::degenerate_embedding,
                "zero-norm embedding row");
        auto a = embeddings_->row(i);
        auto b = embeddings_->row(j);
        double dot = 0.0;
        for (std::size_t k = 0; k < a.size(); ++k) dot += a[k] * b[k];
        const double c = std::clamp(dot / (norms_[i] * norms_[j]), -1.0, 1.0);
        return 1.0 - c;
      }
      case MetricKind::mse_embedding: {
        auto a = embeddings_->row(i);
        auto b = embeddings_->row(j);
        double s = 0.0;
        for (std::size_t k = 0; k < a.size(); ++k) {
          const double diff = a[k] - b[k];
          s += diff * diff;
        }
        return s / static_cast<double>(a.size());
      }
    }
    return 0.0;
  }

  double distance(TokenId a, TokenId b) const {
    return distance_at(subset_.index_of(a), subset_.index_of(b));
  }

  /// d(token_i, target) for every subset entry i.
  std::vector<double> distance_row(TokenId target) const {
    const std::size_t t = subset_.index_of(target);
    std::vector<double> row(size());
    for (std::size_t i = 0; i < size(); ++i) row[i] = distance_at(i, t);
    return row;
  }

  /// k closest subset tokens to target, target excluded, ties by token id.
  std::vector<TokenId> nearest_tokens(TokenId target, std::size_t k) const {
    require(k >= 1 && k < size(), ErrorKind::range, "k must be in [1, M-1]");
    const auto row = distance_row(target);
    std::vector<std::size_t> order;
    order.reserve(size() - 1);
    const std::size_t t = subset_.index_of(target);
    for (std::size_t i = 0; i < size(); ++i)
      if (i != t) order.push_back(i);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t a, std::size_t b) {
                        if (row[a] != row[b]) return row[a] < row[b];
                        return subset_.token(a) < subset_.token(b);
                      });
    std::vector<TokenId> out(k);
    for (std::size_t i = 0; i < k; ++i) out[i] = subset_.token(order[i]);
    return out;
  }

 private:
  MetricKind kind_;
  VocabSubset subset_;
  std::shared_ptr<const EmbeddingTable> embeddings_;
  std::vector<double> norms_;
};

/// Codebook manifest: {"path": ..., "m": ..., "d": ..., "metric": ...}. The
/// path is resolved relative to the manifest's directory. Subset tokens are
/// 0..m-1 of a vocabulary of size vocab_size (defaults to m).
struct CodebookManifest {
  std::string path;
  std::size_t m = 0;
  std::size_t d = 0;
  MetricKind metric = MetricKind::mse_embedding;

  nlohmann::json to_json() const {
    return {{"path", path}, {"m", m}, {"d", d}, {"metric", to_string(metric)}};
  }

  static CodebookManifest from_json(const nlohmann::json& j) {
    CodebookManifest mf;
    try {
      mf.path = j.at("path").get<std::string>();
      mf.m = j.at("m").get<std::size_t>();
      mf.d = j.at("d").get<std::size_t>();
      mf.metric = metric_kind_from_string(j.at("metric").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::config, std::string("bad codebook manifest: ") + e.what());
    }
    require(is_embedding_kind(mf.metric), ErrorKind::config, "codebook manifest needs an embedding metric");
    return mf;
  }
};

inline MetricSpec load_codebook_metric(const std::filesystem::path& manifest_path,
                                       std::optional<std::size_t> vocab_size = std::nullopt) {
  std::ifstream is(manifest_path);
  require(static_cast<bool>(is), ErrorKind::io, "cannot open " + manifest_path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::io, std::string("manifest is not JSON: ") + e.what());
  }
  const auto mf = CodebookManifest::from_json(j);
  auto table = std::make_shared<const EmbeddingTable>(
      EmbeddingTable::load(manifest_path.parent_path() / mf.path));
  require(table->rows() == mf.m && table->dim() == mf.d, ErrorKind::shape,
          "codebook file shape disagrees with manifest");
  return MetricSpec(mf.metric, VocabSubset::iota(vocab_size.value_or(mf.m), mf.m, false), table);
}

}  // namespace dist2
