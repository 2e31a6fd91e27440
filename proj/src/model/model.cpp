#include "caseloop/model/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <unordered_map>

#include "caseloop/core/error.hpp"
#include "caseloop/core/hash.hpp"
#include "caseloop/core/records.hpp"
#include "caseloop/core/text.hpp"
#include "caseloop/rules/rules.hpp"

namespace caseloop::model {

const char* block_name(std::size_t b) {
  static constexpr std::array<const char*, kNumBlocks> kNames{
      "encoder.embed", "encoder.hidden_w", "encoder.hidden_b", "retrieval.w", "coarse.w",
      "coarse.b",      "fine.w1",          "fine.b1",          "fine.w2",     "fine.b2"};
  return kNames[b];
}

namespace {

constexpr std::size_t kLabels = RelevanceLabel::kLevels;

std::size_t fine_input_dim(const ModelDims& d) { return 3 * d.embed + kCrossDim; }

// out[r] += sum_c W[r, c] x[c]
void gemv(const std::vector<double>& w, std::size_t rows, std::size_t cols, const double* x, double* out) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = w.data() + r * cols;
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += row[c] * x[c];
    out[r] += acc;
  }
}

// out[c] += sum_r W[r, c] y[r]
void gemv_t(const std::vector<double>& w, std::size_t rows, std::size_t cols, const double* y, double* out) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = w.data() + r * cols;
    const double yr = y[r];
    if (yr == 0.0) continue;
    for (std::size_t c = 0; c < cols; ++c) out[c] += row[c] * yr;
  }
}

// G[r, c] += y[r] x[c]
void outer(std::vector<double>& g, std::size_t rows, std::size_t cols, const double* y, const double* x) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double yr = y[r];
    if (yr == 0.0) continue;
    double* row = g.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) row[c] += yr * x[c];
  }
}

double dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

struct Encoded {
  std::vector<double> e;
  std::vector<double> h;
};

void encode_forward(const Checkpoint& ck, const FeatureIds& f, Encoded& out) {
  const std::size_t D = ck.dims.embed;
  out.e.assign(D, 0.0);
  if (!f.empty()) {
    const auto& E = ck.blocks[kEmbed].values;
    for (auto id : f) {
      const double* row = E.data() + static_cast<std::size_t>(id) * D;
      for (std::size_t i = 0; i < D; ++i) out.e[i] += row[i];
    }
    const double inv = 1.0 / static_cast<double>(f.size());
    for (auto& v : out.e) v *= inv;
  }
  out.h = ck.blocks[kHiddenB].values;
  gemv(ck.blocks[kHiddenW].values, D, D, out.e.data(), out.h.data());
  for (auto& v : out.h) v = std::tanh(v);
}

void mark_row(Gradients& g, std::uint32_t row, std::vector<char>& seen) {
  if (!seen[row]) {
    seen[row] = 1;
    g.touched_rows.push_back(row);
  }
}

void encode_backward(const Checkpoint& ck, const FeatureIds& f, const Encoded& enc, const std::vector<double>& dh,
                     Gradients& g, std::vector<char>& seen) {
  const std::size_t D = ck.dims.embed;
  std::vector<double> da(D);
  bool any = false;
  for (std::size_t i = 0; i < D; ++i) {
    da[i] = dh[i] * (1.0 - enc.h[i] * enc.h[i]);
    any = any || da[i] != 0.0;
  }
  if (!any) return;
  outer(g.blocks[kHiddenW], D, D, da.data(), enc.e.data());
  for (std::size_t i = 0; i < D; ++i) g.blocks[kHiddenB][i] += da[i];
  if (f.empty()) return;
  std::vector<double> de(D, 0.0);
  gemv_t(ck.blocks[kHiddenW].values, D, D, da.data(), de.data());
  const double inv = 1.0 / static_cast<double>(f.size());
  auto& gE = g.blocks[kEmbed];
  for (auto id : f) {
    mark_row(g, id, seen);
    double* row = gE.data() + static_cast<std::size_t>(id) * D;
    for (std::size_t i = 0; i < D; ++i) row[i] += de[i] * inv;
  }
}

// Retrieval projection r = Wr h / ||Wr h||.
struct Projected {
  std::vector<double> v;
  std::vector<double> r;
  double norm = 0.0;
};

void project_forward(const Checkpoint& ck, const std::vector<double>& h, Projected& out) {
  const std::size_t D = ck.dims.embed;
  out.v.assign(D, 0.0);
  gemv(ck.blocks[kRetrievalW].values, D, D, h.data(), out.v.data());
  out.norm = std::sqrt(dot(out.v.data(), out.v.data(), D));
  out.r.assign(D, 0.0);
  if (out.norm > 0.0) {
    for (std::size_t i = 0; i < D; ++i) out.r[i] = out.v[i] / out.norm;
  }
}

void project_backward(const Checkpoint& ck, const std::vector<double>& h, const Projected& p,
                      const std::vector<double>& dr, Gradients& g, std::vector<double>& dh) {
  const std::size_t D = ck.dims.embed;
  if (p.norm <= 0.0) return;
  const double rdr = dot(p.r.data(), dr.data(), D);
  std::vector<double> dv(D);
  for (std::size_t i = 0; i < D; ++i) dv[i] = (dr[i] - p.r[i] * rdr) / p.norm;
  outer(g.blocks[kRetrievalW], D, D, dv.data(), h.data());
  gemv_t(ck.blocks[kRetrievalW].values, D, D, dv.data(), dh.data());
}

// Per-token coarse vectors u = tanh(Wc E[f] + bc), cached per feature id.
class TokenVectors {
 public:
  explicit TokenVectors(const Checkpoint& ck) : ck_(ck) {}

  std::size_t slot(std::uint32_t id) {
    auto [it, inserted] = index_.emplace(id, ids_.size());
    if (inserted) {
      const std::size_t C = ck_.dims.coarse;
      const std::size_t D = ck_.dims.embed;
      ids_.push_back(id);
      std::vector<double> u = ck_.blocks[kCoarseB].values;
      gemv(ck_.blocks[kCoarseW].values, C, D, ck_.blocks[kEmbed].values.data() + static_cast<std::size_t>(id) * D,
           u.data());
      for (auto& v : u) v = std::tanh(v);
      u_.push_back(std::move(u));
      du_.emplace_back(C, 0.0);
    }
    return it->second;
  }

  const std::vector<double>& u(std::size_t s) const { return u_[s]; }
  std::vector<double>& du(std::size_t s) { return du_[s]; }

  void backward(Gradients& g, std::vector<char>& seen) {
    const std::size_t C = ck_.dims.coarse;
    const std::size_t D = ck_.dims.embed;
    std::vector<double> da(C);
    std::vector<double> de(D);
    for (std::size_t s = 0; s < ids_.size(); ++s) {
      bool any = false;
      for (std::size_t i = 0; i < C; ++i) {
        da[i] = du_[s][i] * (1.0 - u_[s][i] * u_[s][i]);
        any = any || da[i] != 0.0;
      }
      if (!any) continue;
      const double* e = ck_.blocks[kEmbed].values.data() + static_cast<std::size_t>(ids_[s]) * D;
      outer(g.blocks[kCoarseW], C, D, da.data(), e);
      for (std::size_t i = 0; i < C; ++i) g.blocks[kCoarseB][i] += da[i];
      std::fill(de.begin(), de.end(), 0.0);
      gemv_t(ck_.blocks[kCoarseW].values, C, D, da.data(), de.data());
      mark_row(g, ids_[s], seen);
      double* row = g.blocks[kEmbed].data() + static_cast<std::size_t>(ids_[s]) * D;
      for (std::size_t i = 0; i < D; ++i) row[i] += de[i];
    }
  }

 private:
  const Checkpoint& ck_;
  std::unordered_map<std::uint32_t, std::size_t> index_;
  std::vector<std::uint32_t> ids_;
  std::vector<std::vector<double>> u_;
  std::vector<std::vector<double>> du_;
};

struct MaxSim {
  double score = 0.0;
  std::vector<std::size_t> q_slots;
  std::vector<std::size_t> best;  // matched product slot per query slot
};

MaxSim maxsim_forward(TokenVectors& tv, const FeatureIds& q, const FeatureIds& d, std::size_t C) {
  MaxSim m;
  if (q.empty() || d.empty()) return m;
  std::vector<std::size_t> d_slots;
  d_slots.reserve(d.size());
  for (auto id : d) d_slots.push_back(tv.slot(id));
  for (auto id : q) {
    const std::size_t qs = tv.slot(id);
    double best = -1e300;
    std::size_t arg = d_slots.front();
    for (std::size_t ds : d_slots) {
      const double s = dot(tv.u(qs).data(), tv.u(ds).data(), C);
      if (s > best) {
        best = s;
        arg = ds;
      }
    }
    m.q_slots.push_back(qs);
    m.best.push_back(arg);
    m.score += best;
  }
  m.score /= static_cast<double>(q.size());
  return m;
}

void maxsim_backward(TokenVectors& tv, const MaxSim& m, double dscore, std::size_t C) {
  if (m.q_slots.empty() || dscore == 0.0) return;
  const double scale = dscore / static_cast<double>(m.q_slots.size());
  for (std::size_t i = 0; i < m.q_slots.size(); ++i) {
    const auto& uq = tv.u(m.q_slots[i]);
    const auto& ud = tv.u(m.best[i]);
    auto& dq = tv.du(m.q_slots[i]);
    for (std::size_t k = 0; k < C; ++k) dq[k] += scale * ud[k];
    auto& dd = tv.du(m.best[i]);
    for (std::size_t k = 0; k < C; ++k) dd[k] += scale * uq[k];
  }
}

double log1pexp(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

struct FineForward {
  std::vector<double> x;
  std::vector<double> z;
  std::array<double, kLabels> p{};
};

void fine_forward(const Checkpoint& ck, const std::vector<double>& hq, const std::vector<double>& hd,
                  const CrossFeatures& cross, FineForward& f) {
  const std::size_t D = ck.dims.embed;
  const std::size_t F = ck.dims.fine_hidden;
  const std::size_t X = fine_input_dim(ck.dims);
  f.x.resize(X);
  for (std::size_t i = 0; i < D; ++i) {
    f.x[i] = hq[i] * hd[i];
    f.x[D + i] = hq[i];
    f.x[2 * D + i] = hd[i];
  }
  for (std::size_t i = 0; i < kCrossDim; ++i) f.x[3 * D + i] = cross[i];
  f.z = ck.blocks[kFine1B].values;
  gemv(ck.blocks[kFine1W].values, F, X, f.x.data(), f.z.data());
  for (auto& v : f.z) v = std::tanh(v);
  std::array<double, kLabels> o{};
  for (std::size_t c = 0; c < kLabels; ++c) o[c] = ck.blocks[kFine2B].values[c];
  gemv(ck.blocks[kFine2W].values, kLabels, F, f.z.data(), o.data());
  const double mx = *std::max_element(o.begin(), o.end());
  double total = 0.0;
  for (std::size_t c = 0; c < kLabels; ++c) total += (f.p[c] = std::exp(o[c] - mx));
  for (auto& v : f.p) v /= total;
}

}  // namespace

// ---------------------------------------------------------------------------

Checkpoint Checkpoint::initialize(const ModelDims& dims, std::uint64_t seed) {
  Checkpoint ck;
  ck.dims = dims;
  Rng rng = Rng::derive(seed, "model-init");
  const std::size_t D = dims.embed;
  const std::size_t X = fine_input_dim(dims);
  auto make = [&](std::size_t rows, std::size_t cols, double scale) {
    ParamBlock b;
    b.rows = rows;
    b.cols = cols;
    b.values.resize(rows * cols);
    for (auto& v : b.values) v = scale == 0.0 ? 0.0 : rng.normal() * scale;
    return b;
  };
  ck.blocks[kEmbed] = make(dims.hash, D, 0.3);
  ck.blocks[kHiddenW] = make(D, D, 1.0 / std::sqrt(static_cast<double>(D)));
  ck.blocks[kHiddenB] = make(D, 1, 0.0);
  ck.blocks[kRetrievalW] = make(D, D, 1.0 / std::sqrt(static_cast<double>(D)));
  ck.blocks[kCoarseW] = make(dims.coarse, D, 1.0 / std::sqrt(static_cast<double>(D)));
  ck.blocks[kCoarseB] = make(dims.coarse, 1, 0.0);
  ck.blocks[kFine1W] = make(dims.fine_hidden, X, 1.0 / std::sqrt(static_cast<double>(X)));
  ck.blocks[kFine1B] = make(dims.fine_hidden, 1, 0.0);
  ck.blocks[kFine2W] = make(kLabels, dims.fine_hidden, 1.0 / std::sqrt(static_cast<double>(dims.fine_hidden)));
  ck.blocks[kFine2B] = make(kLabels, 1, 0.0);
  return ck;
}

bool Checkpoint::all_finite() const {
  for (const auto& b : blocks) {
    for (double v : b.values) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

std::size_t Checkpoint::parameter_count() const {
  std::size_t n = 0;
  for (const auto& b : blocks) n += b.values.size();
  return n;
}

std::string Checkpoint::digest() const {
  std::uint64_t h = fnv1a(version);
  for (const auto& b : blocks) {
    h = fnv1a(std::string_view(reinterpret_cast<const char*>(b.values.data()), b.values.size() * sizeof(double)), h);
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace {

constexpr char kMagic[8] = {'C', 'L', 'C', 'K', 'P', 'T', '0', '1'};

Json header_of(const Checkpoint& ck) {
  Json blocks = Json::array();
  for (std::size_t b = 0; b < kNumBlocks; ++b) {
    blocks.push_back(Json{{"name", block_name(b)}, {"rows", ck.blocks[b].rows}, {"cols", ck.blocks[b].cols}});
  }
  return Json{{"version", ck.version},
              {"dims",
               {{"hash", ck.dims.hash},
                {"embed", ck.dims.embed},
                {"coarse", ck.dims.coarse},
                {"fine_hidden", ck.dims.fine_hidden}}},
              {"meta",
               {{"corpus_version", ck.meta.corpus_version},
                {"corpus_size", ck.meta.corpus_size},
                {"loss_curve", ck.meta.loss_curve},
                {"seed", ck.meta.seed},
                {"epochs", ck.meta.epochs},
                {"weights", {ck.meta.weights.retrieval, ck.meta.weights.coarse, ck.meta.weights.fine}}}},
              {"coarse_cutpoints", ck.coarse_cutpoints},
              {"blocks", blocks}};
}

}  // namespace

void Checkpoint::save(const std::filesystem::path& path) const {
  std::string out(kMagic, sizeof kMagic);
  const std::string header = header_of(*this).dump();
  const std::uint64_t len = header.size();
  out.append(reinterpret_cast<const char*>(&len), sizeof len);
  out += header;
  for (const auto& b : blocks) {
    out.append(reinterpret_cast<const char*>(b.values.data()), b.values.size() * sizeof(double));
  }
  write_text(path, out);
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  const std::string raw = read_text(path);
  if (raw.size() < sizeof kMagic + 8 || std::memcmp(raw.data(), kMagic, sizeof kMagic) != 0) {
    throw Error(ErrorCode::kCorruptRecord, path.string() + ": not a checkpoint");
  }
  std::uint64_t len = 0;
  std::memcpy(&len, raw.data() + sizeof kMagic, sizeof len);
  std::size_t pos = sizeof kMagic + sizeof len;
  if (pos + len > raw.size()) throw Error(ErrorCode::kCorruptRecord, path.string() + ": truncated header");
  const Json h = Json::parse(raw.substr(pos, len));
  pos += len;
  Checkpoint ck;
  ck.version = h.at("version").get<std::string>();
  const auto& dims = h.at("dims");
  ck.dims = {dims.at("hash").get<std::size_t>(), dims.at("embed").get<std::size_t>(),
             dims.at("coarse").get<std::size_t>(), dims.at("fine_hidden").get<std::size_t>()};
  const auto& meta = h.at("meta");
  ck.meta.corpus_version = meta.at("corpus_version").get<std::string>();
  ck.meta.corpus_size = meta.at("corpus_size").get<std::size_t>();
  ck.meta.loss_curve = meta.at("loss_curve").get<std::vector<double>>();
  ck.meta.seed = meta.at("seed").get<std::uint64_t>();
  ck.meta.epochs = meta.at("epochs").get<int>();
  const auto w = meta.at("weights").get<std::vector<double>>();
  ck.meta.weights = {w.at(0), w.at(1), w.at(2)};
  ck.coarse_cutpoints = h.at("coarse_cutpoints").get<std::array<double, 3>>();
  const auto& blocks = h.at("blocks");
  if (blocks.size() != kNumBlocks) throw Error(ErrorCode::kCorruptRecord, path.string() + ": block count");
  for (std::size_t b = 0; b < kNumBlocks; ++b) {
    auto& pb = ck.blocks[b];
    pb.rows = blocks[b].at("rows").get<std::size_t>();
    pb.cols = blocks[b].at("cols").get<std::size_t>();
    const std::size_t bytes = pb.rows * pb.cols * sizeof(double);
    if (pos + bytes > raw.size()) throw Error(ErrorCode::kCorruptRecord, path.string() + ": truncated block");
    pb.values.resize(pb.rows * pb.cols);
    std::memcpy(pb.values.data(), raw.data() + pos, bytes);
    pos += bytes;
  }
  if (!ck.all_finite()) throw Error(ErrorCode::kCorruptRecord, path.string() + ": non-finite parameters");
  return ck;
}

// ---------------------------------------------------------------------------

std::vector<Example> featurize(const Corpus& corpus, const ProductLookup& products, const QueryParser& parser) {
  std::vector<Example> out;
  out.reserve(corpus.size());
  std::map<std::string, std::size_t> groups;
  std::map<std::string, std::pair<QueryStructure, FeatureIds>> query_cache;
  for (const auto& s : corpus) {
    auto qit = query_cache.find(s.query.text + '\x1f' + s.query.language);
    if (qit == query_cache.end()) {
      QueryStructure st = s.query.structure ? *s.query.structure : parser.parse(s.query);
      FeatureIds ids = hash_features(query_feature_names(s.query, st));
      qit = query_cache.emplace(s.query.text + '\x1f' + s.query.language, std::make_pair(std::move(st), std::move(ids)))
                .first;
    }
    const Product& d = products(s.product_id);
    Example e;
    e.q = qit->second.second;
    e.d = hash_features(product_feature_names(d));
    e.cross = cross_features(s.query, qit->second.first, d);
    e.label = s.label.value();
    e.group = groups.emplace(s.query.text, groups.size()).first->second;
    out.push_back(std::move(e));
  }
  return out;
}

void Gradients::reset(const Checkpoint& shape) {
  for (std::size_t b = 0; b < kNumBlocks; ++b) {
    auto& g = blocks[b];
    if (g.size() != shape.blocks[b].values.size()) {
      g.assign(shape.blocks[b].values.size(), 0.0);
    } else if (b == kEmbed) {
      const std::size_t D = shape.dims.embed;
      for (auto row : touched_rows) std::fill_n(g.begin() + static_cast<long>(row * D), D, 0.0);
    } else {
      std::fill(g.begin(), g.end(), 0.0);
    }
  }
  touched_rows.clear();
}

LossBreakdown multitask_loss(const Checkpoint& ck, const std::vector<Example>& batch, const TrainConfig& config,
                             Gradients* grad) {
  LossBreakdown L;
  const std::size_t n = batch.size();
  if (n == 0) return L;
  const std::size_t D = ck.dims.embed;
  const std::size_t F = ck.dims.fine_hidden;
  const std::size_t X = fine_input_dim(ck.dims);
  const TaskWeights& w = config.weights;
  std::vector<char> seen(grad ? ck.dims.hash : 0, 0);

  std::vector<Encoded> qe(n), de(n);
  for (std::size_t i = 0; i < n; ++i) {
    encode_forward(ck, batch[i].q, qe[i]);
    encode_forward(ck, batch[i].d, de[i]);
  }
  std::vector<std::vector<double>> dhq(n, std::vector<double>(D, 0.0));
  std::vector<std::vector<double>> dhd(n, std::vector<double>(D, 0.0));

  if (w.fine > 0.0) {
    const double scale = w.fine / static_cast<double>(n);
    FineForward f;
    std::vector<double> dz(F), dx(X);
    for (std::size_t i = 0; i < n; ++i) {
      fine_forward(ck, qe[i].h, de[i].h, batch[i].cross, f);
      const auto y = static_cast<std::size_t>(batch[i].label);
      L.fine += -std::log(std::max(f.p[y], 1e-300)) / static_cast<double>(n);
      if (!grad) continue;
      std::array<double, kLabels> dout{};
      for (std::size_t c = 0; c < kLabels; ++c) dout[c] = scale * (f.p[c] - (c == y ? 1.0 : 0.0));
      outer(grad->blocks[kFine2W], kLabels, F, dout.data(), f.z.data());
      for (std::size_t c = 0; c < kLabels; ++c) grad->blocks[kFine2B][c] += dout[c];
      std::fill(dz.begin(), dz.end(), 0.0);
      gemv_t(ck.blocks[kFine2W].values, kLabels, F, dout.data(), dz.data());
      for (std::size_t k = 0; k < F; ++k) dz[k] *= 1.0 - f.z[k] * f.z[k];
      outer(grad->blocks[kFine1W], F, X, dz.data(), f.x.data());
      for (std::size_t k = 0; k < F; ++k) grad->blocks[kFine1B][k] += dz[k];
      std::fill(dx.begin(), dx.end(), 0.0);
      gemv_t(ck.blocks[kFine1W].values, F, X, dz.data(), dx.data());
      for (std::size_t k = 0; k < D; ++k) {
        dhq[i][k] += dx[k] * de[i].h[k] + dx[D + k];
        dhd[i][k] += dx[k] * qe[i].h[k] + dx[2 * D + k];
      }
    }
  }

  if (w.retrieval > 0.0) {
    std::vector<std::size_t> anchors;
    for (std::size_t i = 0; i < n; ++i) {
      if (batch[i].label >= 2) anchors.push_back(i);
    }
    std::vector<Projected> pq(anchors.size()), pd(anchors.size());
    for (std::size_t a = 0; a < anchors.size(); ++a) {
      project_forward(ck, qe[anchors[a]].h, pq[a]);
      project_forward(ck, de[anchors[a]].h, pd[a]);
    }
    std::vector<std::vector<double>> drq(anchors.size(), std::vector<double>(D, 0.0));
    std::vector<std::vector<double>> drd(anchors.size(), std::vector<double>(D, 0.0));
    std::size_t used = 0;
    double loss = 0.0;
    std::vector<std::vector<std::size_t>> cands(anchors.size());
    std::vector<std::vector<double>> probs(anchors.size());
    for (std::size_t a = 0; a < anchors.size(); ++a) {
      for (std::size_t c = 0; c < anchors.size(); ++c) {
        if (c == a || batch[anchors[c]].group != batch[anchors[a]].group) cands[a].push_back(c);
      }
      if (cands[a].size() < 2) continue;
      ++used;
      std::vector<double> logits;
      for (std::size_t c : cands[a]) logits.push_back(dot(pq[a].r.data(), pd[c].r.data(), D) / config.temperature);
      const double mx = *std::max_element(logits.begin(), logits.end());
      double total = 0.0;
      for (auto& v : logits) total += (v = std::exp(v - mx));
      for (auto& v : logits) v /= total;
      const std::size_t self = static_cast<std::size_t>(std::find(cands[a].begin(), cands[a].end(), a) - cands[a].begin());
      loss += -std::log(std::max(logits[self], 1e-300));
      probs[a] = std::move(logits);
    }
    if (used > 0) {
      L.retrieval = loss / static_cast<double>(used);
      if (grad) {
        const double scale = w.retrieval / static_cast<double>(used) / config.temperature;
        for (std::size_t a = 0; a < anchors.size(); ++a) {
          if (probs[a].empty()) continue;
          for (std::size_t k = 0; k < cands[a].size(); ++k) {
            const std::size_t c = cands[a][k];
            const double g = scale * (probs[a][k] - (c == a ? 1.0 : 0.0));
            for (std::size_t i = 0; i < D; ++i) {
              drq[a][i] += g * pd[c].r[i];
              drd[c][i] += g * pq[a].r[i];
            }
          }
        }
        for (std::size_t a = 0; a < anchors.size(); ++a) {
          project_backward(ck, qe[anchors[a]].h, pq[a], drq[a], *grad, dhq[anchors[a]]);
          project_backward(ck, de[anchors[a]].h, pd[a], drd[a], *grad, dhd[anchors[a]]);
        }
      }
    }
  }

  if (w.coarse > 0.0) {
    const std::size_t C = ck.dims.coarse;
    TokenVectors tv(ck);
    std::vector<MaxSim> ms(n);
    for (std::size_t i = 0; i < n; ++i) ms[i] = maxsim_forward(tv, batch[i].q, batch[i].d, C);
    std::vector<double> ds(n, 0.0);
    std::size_t pairs = 0;
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (batch[i].group != batch[j].group || batch[i].label <= batch[j].label) continue;
        const double margin = config.coarse_scale * (ms[i].score - ms[j].score);
        loss += log1pexp(-margin);
        const double g = -sigmoid(-margin) * config.coarse_scale;
        ds[i] += g;
        ds[j] -= g;
        ++pairs;
      }
    }
    if (pairs > 0) {
      L.coarse = loss / static_cast<double>(pairs);
      if (grad) {
        const double scale = w.coarse / static_cast<double>(pairs);
        for (std::size_t i = 0; i < n; ++i) maxsim_backward(tv, ms[i], ds[i] * scale, C);
        tv.backward(*grad, seen);
      }
    }
  }

  if (grad) {
    for (std::size_t i = 0; i < n; ++i) {
      encode_backward(ck, batch[i].q, qe[i], dhq[i], *grad, seen);
      encode_backward(ck, batch[i].d, de[i], dhd[i], *grad, seen);
    }
    std::sort(grad->touched_rows.begin(), grad->touched_rows.end());
  }
  L.total = w.retrieval * L.retrieval + w.coarse * L.coarse + w.fine * L.fine;
  return L;
}

// ---------------------------------------------------------------------------
// Training

namespace {

class Adam {
 public:
  Adam(const Checkpoint& ck, double lr) : lr_(lr) {
    for (std::size_t b = 0; b < kNumBlocks; ++b) {
      m_[b].assign(ck.blocks[b].values.size(), 0.0);
      v_[b].assign(ck.blocks[b].values.size(), 0.0);
    }
  }

  void set_lr(double lr) { lr_ = lr; }

  void step(Checkpoint& ck, const Gradients& g, const TaskWeights& w) {
    ++t_;
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
    const bool active[kNumBlocks] = {true,           true,           true,         w.retrieval > 0, w.coarse > 0,
                                     w.coarse > 0,   w.fine > 0,     w.fine > 0,   w.fine > 0,      w.fine > 0};
    for (std::size_t b = 0; b < kNumBlocks; ++b) {
      if (!active[b]) continue;
      if (b == kEmbed) {
        const std::size_t D = ck.dims.embed;
        for (auto row : g.touched_rows) update(ck.blocks[b].values, g.blocks[b], b, row * D, row * D + D, c1, c2);
      } else {
        update(ck.blocks[b].values, g.blocks[b], b, 0, g.blocks[b].size(), c1, c2);
      }
    }
  }

 private:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  void update(std::vector<double>& p, const std::vector<double>& g, std::size_t b, std::size_t lo, std::size_t hi,
              double c1, double c2) {
    auto& m = m_[b];
    auto& v = v_[b];
    for (std::size_t i = lo; i < hi; ++i) {
      m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * g[i];
      v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * g[i] * g[i];
      p[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + kEps);
    }
  }

  double lr_;
  long long t_ = 0;
  std::array<std::vector<double>, kNumBlocks> m_;
  std::array<std::vector<double>, kNumBlocks> v_;
};

std::vector<std::vector<std::size_t>> group_indices(const std::vector<Example>& examples) {
  std::size_t groups = 0;
  for (const auto& e : examples) groups = std::max(groups, e.group + 1);
  std::vector<std::vector<std::size_t>> out(groups);
  for (std::size_t i = 0; i < examples.size(); ++i) out[examples[i].group].push_back(i);
  return out;
}

std::vector<Example> gather(const std::vector<Example>& examples, const std::vector<std::vector<std::size_t>>& groups,
                            const std::vector<std::size_t>& order, std::size_t lo, std::size_t hi) {
  std::vector<Example> batch;
  for (std::size_t k = lo; k < hi; ++k) {
    for (auto i : groups[order[k]]) batch.push_back(examples[i]);
  }
  return batch;
}

void check_degenerate(const std::vector<Example>& ex, const TaskWeights& w) {
  if (ex.empty()) throw Error(ErrorCode::kDegenerateCorpus, "empty corpus");
  std::set<int> labels;
  for (const auto& e : ex) labels.insert(e.label);
  if (w.fine > 0 && labels.size() < 2) {
    throw Error(ErrorCode::kDegenerateCorpus, "fine task needs at least two distinct labels");
  }
  if (w.coarse > 0) {
    std::map<std::size_t, std::set<int>> per_group;
    for (const auto& e : ex) per_group[e.group].insert(e.label);
    const bool any = std::any_of(per_group.begin(), per_group.end(), [](const auto& kv) { return kv.second.size() >= 2; });
    if (!any) throw Error(ErrorCode::kDegenerateCorpus, "coarse task needs a query with two distinct labels");
  }
  if (w.retrieval > 0) {
    bool pos = false, neg = false;
    for (const auto& e : ex) (e.label >= 2 ? pos : neg) = true;
    if (!pos || !neg) throw Error(ErrorCode::kDegenerateCorpus, "retrieval task needs positive and negative pairs");
  }
}

// Monotone thresholds on coarse scores maximizing agreement with target bins.
std::array<double, 3> fit_cutpoints(std::vector<std::pair<double, int>> items) {
  std::array<double, 3> cuts{0.25, 0.5, 0.75};
  if (items.empty()) return cuts;
  std::sort(items.begin(), items.end());
  const std::size_t n = items.size();
  std::vector<std::array<int, kLabels>> best(n + 1);
  std::vector<std::array<int, kLabels>> from(n + 1);
  best[0].fill(0);
  for (std::size_t i = 1; i <= n; ++i) {
    int run = -1;
    int arg = 0;
    for (std::size_t k = 0; k < kLabels; ++k) {
      if (best[i - 1][k] > run) {
        run = best[i - 1][k];
        arg = static_cast<int>(k);
      }
      best[i][k] = run + (items[i - 1].second == static_cast<int>(k) ? 1 : 0);
      from[i][k] = arg;
    }
  }
  std::vector<int> bins(n);
  int k = static_cast<int>(std::max_element(best[n].begin(), best[n].end()) - best[n].begin());
  for (std::size_t i = n; i >= 1; --i) {
    bins[i - 1] = k;
    k = from[i][static_cast<std::size_t>(k)];
  }
  for (std::size_t c = 0; c < 3; ++c) {
    const int level = static_cast<int>(c) + 1;
    const auto first = std::find_if(bins.begin(), bins.end(), [&](int b) { return b >= level; });
    const std::size_t idx = static_cast<std::size_t>(first - bins.begin());
    if (idx == n) {
      cuts[c] = items.back().first + 1.0;
    } else if (idx == 0) {
      cuts[c] = items.front().first - 1.0;
    } else {
      cuts[c] = 0.5 * (items[idx - 1].first + items[idx].first);
    }
  }
  return cuts;
}

}  // namespace

Checkpoint train_multitask(const Corpus& corpus, const ProductLookup& products, const QueryParser& parser,
                           const TrainConfig& config, const std::string& version) {
  const std::vector<Example> examples = featurize(corpus, products, parser);
  check_degenerate(examples, config.weights);
  Checkpoint ck = Checkpoint::initialize(config.dims, config.seed);
  ck.version = version;
  ck.meta.corpus_size = corpus.size();
  ck.meta.seed = config.seed;
  ck.meta.epochs = config.epochs;
  ck.meta.weights = config.weights;
  {
    std::uint64_t h = fnv1a("corpus");
    for (const auto& s : corpus) h = fnv1a(dedup_key(s), h);
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    ck.meta.corpus_version = buf;
  }

  const auto groups = group_indices(examples);
  std::vector<std::size_t> fixed(groups.size());
  for (std::size_t i = 0; i < fixed.size(); ++i) fixed[i] = i;
  const auto per_batch = static_cast<std::size_t>(std::max(1, config.queries_per_batch));
  Rng rng = Rng::derive(config.seed, "train-order");
  Adam adam(ck, config.learning_rate);
  Gradients grad;

  auto full_loss = [&] {
    double total = 0.0;
    for (std::size_t lo = 0; lo < fixed.size(); lo += per_batch) {
      const auto batch = gather(examples, groups, fixed, lo, std::min(fixed.size(), lo + per_batch));
      total += multitask_loss(ck, batch, config, nullptr).total * static_cast<double>(batch.size());
    }
    return total / static_cast<double>(examples.size());
  };

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<std::size_t> order = fixed;
    rng.shuffle(order);
    adam.set_lr(config.learning_rate / (1.0 + config.lr_decay * epoch));
    for (std::size_t lo = 0; lo < order.size(); lo += per_batch) {
      const auto batch = gather(examples, groups, order, lo, std::min(order.size(), lo + per_batch));
      grad.reset(ck);
      multitask_loss(ck, batch, config, &grad);
      adam.step(ck, grad, config.weights);
    }
    ck.meta.loss_curve.push_back(full_loss());
  }

  if (config.weights.coarse > 0.0) {
    std::vector<std::pair<double, int>> items;
    items.reserve(examples.size());
    TokenVectors tv(ck);
    Encoded qe, de;
    FineForward f;
    for (const auto& e : examples) {
      encode_forward(ck, e.q, qe);
      encode_forward(ck, e.d, de);
      fine_forward(ck, qe.h, de.h, e.cross, f);
      const int fine_label = static_cast<int>(std::max_element(f.p.begin(), f.p.end()) - f.p.begin());
      items.emplace_back(maxsim_forward(tv, e.q, e.d, ck.dims.coarse).score, fine_label);
    }
    ck.coarse_cutpoints = fit_cutpoints(std::move(items));
  }
  if (!ck.all_finite()) throw Error(ErrorCode::kDegenerateCorpus, "training diverged");
  return ck;
}

// ---------------------------------------------------------------------------
// Inference

RelevanceModel::RelevanceModel(std::shared_ptr<const Checkpoint> checkpoint, std::shared_ptr<const QueryParser> parser)
    : checkpoint_(std::move(checkpoint)), parser_(std::move(parser)) {}

QueryStructure RelevanceModel::structure_of(const Query& q) const {
  return q.structure ? *q.structure : parser_->parse(q);
}

namespace {

std::vector<double> embed(const Checkpoint& ck, const FeatureIds& f) {
  std::vector<double> basis(ck.dims.embed, 0.0);
  basis[0] = 1.0;
  if (f.empty()) return basis;
  Encoded enc;
  encode_forward(ck, f, enc);
  Projected p;
  project_forward(ck, enc.h, p);
  if (!(p.norm > 0.0)) return basis;
  return p.r;
}

}  // namespace

std::vector<double> RelevanceModel::encode(const Query& q) const {
  return embed(*checkpoint_, hash_features(query_feature_names(q, structure_of(q))));
}

std::vector<double> RelevanceModel::encode(const Product& d) const {
  return embed(*checkpoint_, hash_features(product_feature_names(d)));
}

std::vector<double> RelevanceModel::coarse_score(const Query& q, const std::vector<Product>& candidates) const {
  coarse_calls_->fetch_add(candidates.size());
  const FeatureIds qf = hash_features(query_feature_names(q, structure_of(q)));
  TokenVectors tv(*checkpoint_);
  std::vector<double> out;
  out.reserve(candidates.size());
  for (const auto& d : candidates) {
    out.push_back(maxsim_forward(tv, qf, hash_features(product_feature_names(d)), checkpoint_->dims.coarse).score);
  }
  return out;
}

RelevanceLabel RelevanceModel::coarse_bin(double score) const {
  int bin = 0;
  for (double c : checkpoint_->coarse_cutpoints) bin += score >= c ? 1 : 0;
  return RelevanceLabel::of(bin);
}

Prediction RelevanceModel::fine_base(const Query& q, const Product& d) const {
  fine_calls_->fetch_add(1);
  const QueryStructure s = structure_of(q);
  Encoded qe, de;
  encode_forward(*checkpoint_, hash_features(query_feature_names(q, s)), qe);
  encode_forward(*checkpoint_, hash_features(product_feature_names(d)), de);
  FineForward f;
  fine_forward(*checkpoint_, qe.h, de.h, cross_features(q, s, d), f);
  return Prediction::from_scores(f.p, Stage::kFine);
}

Prediction RelevanceModel::fine_score(const Query& q, const Product& d, const std::vector<Directive>& active) const {
  const Prediction base = fine_base(q, d);
  if (active.empty()) return base;
  return rules::apply_rules(base, active, structure_of(q), d).prediction;
}

// ---------------------------------------------------------------------------

LogisticBaseline LogisticBaseline::train(const std::vector<Example>& examples, int epochs, double learning_rate) {
  if (examples.empty()) throw Error(ErrorCode::kDegenerateCorpus, "no examples");
  LogisticBaseline m;
  const double n = static_cast<double>(examples.size());
  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::array<std::array<double, kCrossDim>, kLabels> g{};
    for (const auto& e : examples) {
      std::array<double, kLabels> z{};
      for (std::size_t c = 0; c < kLabels; ++c) z[c] = dot(m.w_[c].data(), e.cross.data(), kCrossDim);
      const double mx = *std::max_element(z.begin(), z.end());
      double total = 0.0;
      for (auto& v : z) total += (v = std::exp(v - mx));
      for (std::size_t c = 0; c < kLabels; ++c) {
        const double d = z[c] / total - (static_cast<int>(c) == e.label ? 1.0 : 0.0);
        for (std::size_t f = 0; f < kCrossDim; ++f) g[c][f] += d * e.cross[f] / n;
      }
    }
    for (std::size_t c = 0; c < kLabels; ++c) {
      for (std::size_t f = 0; f < kCrossDim; ++f) m.w_[c][f] -= learning_rate * g[c][f];
    }
  }
  return m;
}

RelevanceLabel LogisticBaseline::predict(const CrossFeatures& x) const {
  std::size_t best = 0;
  double best_z = -1e300;
  for (std::size_t c = 0; c < kLabels; ++c) {
    const double z = dot(w_[c].data(), x.data(), kCrossDim);
    if (z > best_z) {
      best_z = z;
      best = c;
    }
  }
  return RelevanceLabel::of(static_cast<int>(best));
}

}  // namespace caseloop::model
