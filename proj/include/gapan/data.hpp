#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gapan/losses.hpp"
#include "gapan/numerics.hpp"

namespace gapan {

enum class Split { Train, Test };

// M x C float32 features (row-major) with one label per row.
struct FeatureDataset {
  std::size_t dim = 0;
  std::vector<float> features;
  std::vector<std::uint32_t> labels;
  Split split = Split::Train;

  std::size_t count() const { return labels.size(); }
  std::span<const float> row(std::size_t i) const { return {features.data() + i * dim, dim}; }

  template <class T>
  Vec<T> row_as(std::size_t i) const {
    const auto r = row(i);
    return Vec<T>(r.begin(), r.end());
  }

  // Distinct labels in ascending order; position = dense class index.
  std::vector<std::uint32_t> classes() const {
    std::set<std::uint32_t> s(labels.begin(), labels.end());
    return {s.begin(), s.end()};
  }
  std::size_t class_count() const { return classes().size(); }

  // Labels remapped to dense indices into classes().
  std::vector<std::size_t> dense_labels() const {
    const auto cls = classes();
    std::vector<std::size_t> out(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i)
      out[i] = static_cast<std::size_t>(std::lower_bound(cls.begin(), cls.end(), labels[i]) - cls.begin());
    return out;
  }

  void validate() const {
    if (dim == 0) throw DatasetError("dataset: feature dimension is zero");
    if (labels.empty()) throw DatasetError("dataset: no instances");
    if (features.size() != labels.size() * dim) throw DatasetError("dataset: feature matrix size mismatch");
    std::map<std::uint32_t, std::size_t> counts;
    for (auto y : labels) ++counts[y];
    for (const auto& [y, n] : counts)
      if (n < 2)
        throw DatasetError("dataset: class " + std::to_string(y) + " has " + std::to_string(n) +
                           " instance(s); every class needs at least 2");
  }

  bool operator==(const FeatureDataset&) const = default;
};

inline void check_disjoint(const FeatureDataset& train, const FeatureDataset& test) {
  const auto a = train.classes(), b = test.classes();
  std::vector<std::uint32_t> both;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(both));
  if (!both.empty())
    throw DatasetError("dataset: train and test share class " + std::to_string(both.front()));
}

// ---------------------------------------------------------------------------
// GAPF: "GAPF" | u32 version=1 | u32 count | u32 dim | count*dim f32 | count u32 labels
// All little-endian. A text variant has one "label,v1,...,vC" row per line.

inline constexpr char kFeatureMagic[4] = {'G', 'A', 'P', 'F'};
inline constexpr std::uint32_t kFeatureVersion = 1;

namespace io {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline void put_f32(std::string& out, float f) {
  std::uint32_t u;
  std::memcpy(&u, &f, 4);
  put_u32(out, u);
}

inline void put_f64(std::string& out, double d) {
  std::uint64_t u;
  std::memcpy(&u, &d, 8);
  put_u64(out, u);
}

// Bounds-checked little-endian reader over an in-memory file.
class Reader {
 public:
  explicit Reader(std::string bytes, std::string what) : bytes_(std::move(bytes)), what_(std::move(what)) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  void need(std::size_t n, const std::string& field) const {
    if (remaining() < n)
      throw FormatError(what_ + ": truncated " + field + ": expected " + std::to_string(n) + " bytes, got " +
                            std::to_string(remaining()),
                        pos_);
  }

  std::string bytes(std::size_t n, const std::string& field) {
    need(n, field);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::uint32_t u32(const std::string& field) {
    need(4, field);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::uint64_t u64(const std::string& field) {
    need(8, field);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }

  float f32(const std::string& field) {
    const std::uint32_t u = u32(field);
    float f;
    std::memcpy(&f, &u, 4);
    return f;
  }

  double f64(const std::string& field) {
    const std::uint64_t u = u64(field);
    double d;
    std::memcpy(&d, &u, 8);
    return d;
  }

  void expect_end() const {
    if (remaining() != 0)
      throw FormatError(what_ + ": " + std::to_string(remaining()) + " trailing bytes after payload", pos_);
  }

 private:
  std::string bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write to '" + path + "' failed");
}

}  // namespace io

inline std::string encode_feature_file(const FeatureDataset& ds) {
  if (ds.features.size() != ds.labels.size() * ds.dim) throw DatasetError("dataset: feature matrix size mismatch");
  std::string out(kFeatureMagic, 4);
  io::put_u32(out, kFeatureVersion);
  io::put_u32(out, static_cast<std::uint32_t>(ds.count()));
  io::put_u32(out, static_cast<std::uint32_t>(ds.dim));
  out.reserve(out.size() + ds.features.size() * 4 + ds.labels.size() * 4);
  for (float f : ds.features) io::put_f32(out, f);
  for (auto y : ds.labels) io::put_u32(out, y);
  return out;
}

inline FeatureDataset decode_feature_text(const std::string& text, Split split) {
  FeatureDataset ds;
  ds.split = split;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0, offset = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t line_offset = offset;
    offset += line.size() + 1;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos || line[line.find_first_not_of(" \t")] == '#') continue;
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() < 2)
      throw FormatError("feature text: line " + std::to_string(line_no) + " needs a label and at least one value",
                        line_offset);
    try {
      std::size_t used = 0;
      const long label = std::stol(cells[0], &used);
      if (label < 0) throw std::invalid_argument("negative label");
      ds.labels.push_back(static_cast<std::uint32_t>(label));
      for (std::size_t i = 1; i < cells.size(); ++i) ds.features.push_back(std::stof(cells[i]));
    } catch (const std::exception&) {
      throw FormatError("feature text: unparsable value on line " + std::to_string(line_no), line_offset);
    }
    const std::size_t d = cells.size() - 1;
    if (ds.dim == 0) ds.dim = d;
    if (d != ds.dim)
      throw FormatError("feature text: line " + std::to_string(line_no) + " has " + std::to_string(d) +
                            " values, expected " + std::to_string(ds.dim),
                        line_offset);
  }
  return ds;
}

inline FeatureDataset decode_feature_file(const std::string& bytes, Split split = Split::Train) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kFeatureMagic, 4) != 0) {
    // Not GAPF: accept the text variant when the first byte looks like a label or comment.
    const auto first = bytes.find_first_not_of(" \t\r\n");
    if (first != std::string::npos && (std::isdigit(static_cast<unsigned char>(bytes[first])) || bytes[first] == '#'))
      return decode_feature_text(bytes, split);
    throw FormatError("feature file: bad magic (expected \"GAPF\")", 0);
  }
  io::Reader r(bytes, "feature file");
  r.bytes(4, "magic");
  const std::size_t version_at = r.offset();
  const std::uint32_t version = r.u32("version");
  if (version != kFeatureVersion)
    throw FormatError("feature file: unsupported version " + std::to_string(version), version_at);
  FeatureDataset ds;
  ds.split = split;
  const std::uint32_t count = r.u32("count");
  ds.dim = r.u32("dim");
  const std::size_t payload = static_cast<std::size_t>(count) * ds.dim * 4 + static_cast<std::size_t>(count) * 4;
  r.need(payload, "payload");
  ds.features.resize(static_cast<std::size_t>(count) * ds.dim);
  for (auto& f : ds.features) f = r.f32("features");
  ds.labels.resize(count);
  for (auto& y : ds.labels) y = r.u32("labels");
  r.expect_end();
  return ds;
}

/// Reads GAPF (or the text variant) and validates the dataset invariants.
inline FeatureDataset load_feature_file(const std::string& path, Split split = Split::Train, bool validate = true) {
  FeatureDataset ds = decode_feature_file(io::read_file(path), split);
  if (validate) ds.validate();
  return ds;
}

inline void write_feature_file(const FeatureDataset& ds, const std::string& path) {
  io::write_file(path, encode_feature_file(ds));
}

inline void write_feature_text(const FeatureDataset& ds, const std::string& path) {
  std::ostringstream os;
  os.precision(9);
  for (std::size_t i = 0; i < ds.count(); ++i) {
    os << ds.labels[i];
    for (float f : ds.row(i)) os << ',' << f;
    os << '\n';
  }
  io::write_file(path, os.str());
}

// ---------------------------------------------------------------------------
// Synthetic seen/unseen benchmark

struct SyntheticSpec {
  std::size_t dim = 32;
  std::size_t seen_classes = 8;
  std::size_t unseen_classes = 8;
  std::size_t instances_per_class = 20;
  double class_separation = 3.0;
  double intra_class_scale = 1.0;
  // Trailing coordinates carrying class-independent noise of stddev nuisance_scale.
  std::size_t nuisance_dims = 8;
  double nuisance_scale = 4.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (dim == 0 || seen_classes == 0 || unseen_classes == 0)
      throw ArgumentError("synthetic spec: dim and class counts must be positive");
    if (instances_per_class < 2)
      throw DatasetError("synthetic spec: instances_per_class must be >= 2 (every class needs at least 2 instances)");
    if (nuisance_dims >= dim) throw ArgumentError("synthetic spec: nuisance_dims must leave at least one signal dim");
    if (class_separation < 0 || intra_class_scale < 0 || nuisance_scale < 0)
      throw ArgumentError("synthetic spec: scales must be non-negative");
  }
};

/// Gaussian class blobs with centers on a sphere of radius class_separation
/// in the signal coordinates, plus shared high-variance nuisance coordinates.
/// Seen classes (labels 0..S-1) form the train split; unseen ones (S..S+U-1) the test split.
inline std::pair<FeatureDataset, FeatureDataset> gen_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const std::size_t signal = spec.dim - spec.nuisance_dims;
  auto make_split = [&](std::size_t first_label, std::size_t n_classes, Split split) {
    FeatureDataset ds;
    ds.dim = spec.dim;
    ds.split = split;
    for (std::size_t c = 0; c < n_classes; ++c) {
      std::vector<double> center(signal);
      double nrm = 0;
      for (auto& x : center) {
        x = standard_normal(rng);
        nrm += x * x;
      }
      nrm = std::sqrt(nrm);
      for (auto& x : center) x = nrm > 0 ? x / nrm * spec.class_separation : 0.0;
      for (std::size_t i = 0; i < spec.instances_per_class; ++i) {
        for (std::size_t j = 0; j < spec.dim; ++j) {
          const double v = j < signal ? center[j] + spec.intra_class_scale * standard_normal(rng)
                                      : spec.nuisance_scale * standard_normal(rng);
          ds.features.push_back(static_cast<float>(v));
        }
        ds.labels.push_back(static_cast<std::uint32_t>(first_label + c));
      }
    }
    return ds;
  };
  FeatureDataset train = make_split(0, spec.seen_classes, Split::Train);
  FeatureDataset test = make_split(spec.seen_classes, spec.unseen_classes, Split::Test);
  return {std::move(train), std::move(test)};
}

/// n_categories distinct classes drawn uniformly without replacement, two
/// distinct instances of each, in random order. Labels are dense indices.
template <class T>
Batch<T> sample_batch(const FeatureDataset& ds, std::size_t n_categories, Rng& rng) {
  const auto dense = ds.dense_labels();
  const std::size_t num_classes = ds.class_count();
  std::vector<std::vector<std::size_t>> members(num_classes);
  for (std::size_t i = 0; i < dense.size(); ++i) members[dense[i]].push_back(i);
  std::vector<std::size_t> eligible;
  for (std::size_t k = 0; k < num_classes; ++k)
    if (members[k].size() >= 2) eligible.push_back(k);
  if (n_categories == 0 || eligible.size() < n_categories)
    throw ArgumentError("sample_batch: need " + std::to_string(n_categories) + " classes with >= 2 instances, have " +
                        std::to_string(eligible.size()));
  shuffle(eligible.begin(), eligible.end(), rng);
  std::vector<std::size_t> rows;
  for (std::size_t c = 0; c < n_categories; ++c) {
    const auto& m = members[eligible[c]];
    const std::size_t a = uniform_index(rng, m.size());
    std::size_t b = uniform_index(rng, m.size() - 1);
    if (b >= a) ++b;
    rows.push_back(m[a]);
    rows.push_back(m[b]);
  }
  shuffle(rows.begin(), rows.end(), rng);
  Batch<T> batch;
  for (std::size_t r : rows) {
    batch.features.push_back(ds.row_as<T>(r));
    batch.labels.push_back(dense[r]);
    batch.rows.push_back(r);
  }
  batch.positive_index.assign(rows.size(), 0);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows.size(); ++j)
      if (j != i && batch.labels[j] == batch.labels[i]) batch.positive_index[i] = j;
  return batch;
}

}  // namespace gapan
