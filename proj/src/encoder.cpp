#include "ctxgnn/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>

namespace ctxgnn {

namespace {

constexpr std::array<NodeType, 3> kNodeTypes{NodeType::article, NodeType::post, NodeType::user};

std::string type_name(NodeType t) { return std::string(to_string(t)); }

std::string layer_prefix(Index layer) { return "layer" + std::to_string(layer); }

}  // namespace

std::vector<std::string> default_edge_types() {
  std::vector<std::string> out;
  for (const auto& t : canonical_edge_types()) out.emplace_back(t.name);
  for (const auto& t : canonical_edge_types()) out.push_back(std::string(kReversePrefix) + std::string(t.name));
  return out;
}

ResolvedEdgeType resolve_edge_type(const std::string& name) {
  const bool reversed = name.starts_with(kReversePrefix);
  const std::string canonical = reversed ? name.substr(kReversePrefix.size()) : name;
  const EdgeTypeInfo* info = find_canonical_edge_type(canonical);
  if (!info) throw EncoderConfigError("unknown edge type '" + name + "'");
  return {name, canonical, reversed ? info->dst : info->src, reversed ? info->src : info->dst, reversed};
}

void validate(const EncoderConfig& cfg) {
  if (cfg.n_layers < 1) throw EncoderConfigError("n_layers must be >= 1");
  if (cfg.hidden_dim < 1 || cfg.n_heads < 1 || cfg.hidden_dim % cfg.n_heads != 0)
    throw EncoderConfigError("hidden_dim " + std::to_string(cfg.hidden_dim) + " not divisible by n_heads " +
                             std::to_string(cfg.n_heads));
  if (cfg.feature_dim < 1) throw EncoderConfigError("feature_dim must be >= 1");
  std::set<std::string> seen;
  for (const auto& e : cfg.edge_types) {
    resolve_edge_type(e);
    if (!seen.insert(e).second) throw EncoderConfigError("duplicate edge type '" + e + "'");
  }
}

nlohmann::json to_json(const EncoderConfig& cfg) {
  return {{"hidden_dim", cfg.hidden_dim},
          {"n_layers", cfg.n_layers},
          {"n_heads", cfg.n_heads},
          {"feature_dim", cfg.feature_dim},
          {"edge_types", cfg.edge_types},
          {"readout_includes_article", cfg.readout_includes_article}};
}

EncoderConfig encoder_config_from_json(const nlohmann::json& j, EncoderConfig base) {
  if (!j.is_object()) throw EncoderConfigError("encoder config must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "hidden_dim") base.hidden_dim = v.get<Index>();
      else if (key == "n_layers") base.n_layers = v.get<Index>();
      else if (key == "n_heads") base.n_heads = v.get<Index>();
      else if (key == "feature_dim") base.feature_dim = v.get<Index>();
      else if (key == "edge_types") base.edge_types = v.get<std::vector<std::string>>();
      else if (key == "readout_includes_article") base.readout_includes_article = v.get<bool>();
      else throw EncoderConfigError("unknown encoder config field '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw EncoderConfigError(key + ": " + e.what());
    }
  }
  validate(base);
  return base;
}

// ---------------------------------------------------------------------------
// Parameters

Param& EncoderParams::at(const std::string& name) {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw std::out_of_range("no parameter named '" + name + "'");
  return it->second;
}

const Param& EncoderParams::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw std::out_of_range("no parameter named '" + name + "'");
  return it->second;
}

std::vector<Param*> EncoderParams::all() {
  std::vector<Param*> out;
  for (auto& [_, p] : tensors) out.push_back(&p);
  return out;
}

std::vector<Param*> EncoderParams::encoder_only() {
  std::vector<Param*> out;
  for (auto& [name, p] : tensors)
    if (!is_head_param(name)) out.push_back(&p);
  return out;
}

void EncoderParams::zero_grad() {
  for (auto& [_, p] : tensors) p.zero_grad();
}

bool is_head_param(const std::string& name) { return name.starts_with("head."); }

std::map<std::string, std::pair<Index, Index>> shape_table(const EncoderConfig& cfg) {
  validate(cfg);
  std::map<std::string, std::pair<Index, Index>> t;
  const Index d = cfg.feature_dim, h = cfg.hidden_dim, k = cfg.head_dim();
  for (auto nt : kNodeTypes) {
    t["input." + type_name(nt) + ".weight"] = {d, h};
    t["input." + type_name(nt) + ".bias"] = {1, h};
  }
  for (Index l = 0; l < cfg.n_layers; ++l) {
    const std::string lp = layer_prefix(l);
    for (auto nt : kNodeTypes) {
      for (const char* proj : {"k", "q", "v", "a"}) {
        t[lp + ".node." + type_name(nt) + "." + proj + ".weight"] = {h, h};
        t[lp + ".node." + type_name(nt) + "." + proj + ".bias"] = {1, h};
      }
    }
    for (const auto& e : cfg.edge_types) {
      t[lp + ".edge." + e + ".att"] = {h, k};
      t[lp + ".edge." + e + ".msg"] = {h, k};
      t[lp + ".edge." + e + ".prior"] = {1, cfg.n_heads};
    }
  }
  t["head.recon.weight"] = {h, d};
  t["head.recon.bias"] = {1, d};
  t["head.context.weight"] = {2 * h, 1};
  t["head.context.bias"] = {1, 1};
  t["head.count.weight"] = {cfg.readout_dim(), 1};
  t["head.count.bias"] = {1, 1};
  t["head.classify.weight"] = {cfg.readout_dim(), 2};
  t["head.classify.bias"] = {1, 2};
  return t;
}

namespace {

Matrix init_tensor(const std::string& name, Index rows, Index cols, const EncoderConfig& cfg, std::mt19937_64& rng) {
  if (name.ends_with(".bias")) return Matrix::Zero(rows, cols);
  if (name.ends_with(".prior")) return Matrix::Ones(rows, cols);
  // Per-head blocks of the edge transforms are k x k.
  const bool per_head = name.ends_with(".att") || name.ends_with(".msg");
  const double fan = per_head ? 2.0 * static_cast<double>(cfg.head_dim()) : static_cast<double>(rows + cols);
  std::uniform_real_distribution<double> u(-std::sqrt(6.0 / fan), std::sqrt(6.0 / fan));
  Matrix m(rows, cols);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) m(r, c) = u(rng);
  return m;
}

std::mt19937_64 seeded(std::uint64_t seed, std::uint32_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), stream};
  return std::mt19937_64(seq);
}

}  // namespace

EncoderParams init_params(const EncoderConfig& cfg, std::uint64_t seed, std::uint64_t head_seed) {
  EncoderParams p;
  auto rng = seeded(seed, 0xe4c0u);
  for (const auto& [name, shape] : shape_table(cfg)) {
    if (is_head_param(name)) continue;
    p.tensors.emplace(name, Param(init_tensor(name, shape.first, shape.second, cfg, rng)));
  }
  reinit_heads(p, cfg, head_seed);
  return p;
}

void reinit_heads(EncoderParams& params, const EncoderConfig& cfg, std::uint64_t head_seed) {
  auto rng = seeded(head_seed, 0x4eadu);
  for (const auto& [name, shape] : shape_table(cfg)) {
    if (!is_head_param(name)) continue;
    params.tensors.insert_or_assign(name, Param(init_tensor(name, shape.first, shape.second, cfg, rng)));
  }
}

Var Bindings::operator()(const std::string& name) {
  auto it = cache_.find(name);
  if (it != cache_.end()) return it->second;
  Var v = mutable_ ? tape_.param(mutable_->at(name)) : tape_.frozen(params_->at(name));
  cache_.emplace(name, v);
  return v;
}

// ---------------------------------------------------------------------------
// Forward

Var& NodeEmbeddings::of(NodeType t) {
  switch (t) {
    case NodeType::article: return article;
    case NodeType::post: return post;
    case NodeType::user: return user;
  }
  throw std::logic_error("bad node type");
}

const Var& NodeEmbeddings::of(NodeType t) const { return const_cast<NodeEmbeddings*>(this)->of(t); }

namespace {

const Matrix& features(const HeteroGraph& g, NodeType t) {
  switch (t) {
    case NodeType::article: return g.article_x;
    case NodeType::post: return g.post_x;
    case NodeType::user: return g.user_x;
  }
  throw std::logic_error("bad node type");
}

Var linear(Bindings& p, const Var& x, const std::string& prefix) {
  return add_row(matmul(x, p(prefix + ".weight")), p(prefix + ".bias"));
}

void check_graph_against_config(const HeteroGraph& g, const EncoderConfig& cfg) {
  if (g.feature_dim() != cfg.feature_dim)
    throw EncoderConfigError("graph '" + g.id + "' has feature_dim " + std::to_string(g.feature_dim()) +
                             ", encoder expects " + std::to_string(cfg.feature_dim));
  for (const auto& [name, list] : g.edges) {
    if (list.empty()) continue;
    if (std::find(cfg.edge_types.begin(), cfg.edge_types.end(), name) == cfg.edge_types.end())
      throw EncoderConfigError("graph '" + g.id + "' has edge type '" + name + "' without encoder weights");
  }
}

}  // namespace

NodeEmbeddings input_projection(Bindings& p, const HeteroGraph& g, const EncoderConfig& cfg) {
  check_graph_against_config(g, cfg);
  NodeEmbeddings h;
  for (auto nt : kNodeTypes) h.of(nt) = linear(p, p.tape().constant(features(g, nt)), "input." + type_name(nt));
  return h;
}

NodeEmbeddings hgt_layer(Bindings& p, const HeteroGraph& g, const NodeEmbeddings& h, const EncoderConfig& cfg,
                         Index layer, std::vector<AttentionRecord>* attention) {
  Tape& tape = p.tape();
  const std::string lp = layer_prefix(layer);
  const Index heads = cfg.n_heads;
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim()));

  NodeEmbeddings key, query, value;
  for (auto nt : kNodeTypes) {
    const std::string np = lp + ".node." + type_name(nt);
    key.of(nt) = linear(p, h.of(nt), np + ".k");
    query.of(nt) = linear(p, h.of(nt), np + ".q");
    value.of(nt) = linear(p, h.of(nt), np + ".v");
  }

  NodeEmbeddings out;
  for (auto target : kNodeTypes) {
    const Index n_target = h.of(target).rows();
    std::vector<Var> scores, messages;
    std::vector<Index> segment;
    for (const auto& name : cfg.edge_types) {
      const ResolvedEdgeType et = resolve_edge_type(name);
      if (et.dst != target) continue;
      const EdgeList& list = g.edges_of(et.canonical);
      if (list.empty()) continue;
      std::vector<Index> src, dst;
      src.reserve(list.size());
      dst.reserve(list.size());
      for (const auto& e : list) {
        src.push_back(et.reversed ? e.dst : e.src);
        dst.push_back(et.reversed ? e.src : e.dst);
      }
      const std::string ep = lp + ".edge." + name;
      Var k = matmul_heads(gather_rows(key.of(et.src), std::span<const Index>(src)), p(ep + ".att"), heads);
      Var q = gather_rows(query.of(target), std::span<const Index>(dst));
      scores.push_back(scale(mul_row(head_dot(k, q, heads), p(ep + ".prior")), inv_sqrt_dk));
      messages.push_back(
          matmul_heads(gather_rows(value.of(et.src), std::span<const Index>(src)), p(ep + ".msg"), heads));
      segment.insert(segment.end(), dst.begin(), dst.end());
    }

    Var aggregated;
    if (segment.empty()) {
      aggregated = tape.constant(Matrix::Zero(n_target, cfg.hidden_dim));
    } else {
      Var alpha = segment_softmax(concat_rows(std::span<const Var>(scores)), std::span<const Index>(segment), n_target);
      if (attention) attention->push_back({target, alpha.value(), segment});
      Var weighted = head_scale(concat_rows(std::span<const Var>(messages)), alpha, heads);
      aggregated = scatter_add_rows(weighted, std::span<const Index>(segment), n_target);
    }
    out.of(target) = add(h.of(target), linear(p, gelu(aggregated), lp + ".node." + type_name(target) + ".a"));
  }
  return out;
}

NodeEmbeddings encode(Bindings& p, const HeteroGraph& g, const EncoderConfig& cfg, EncodeTrace* trace) {
  NodeEmbeddings h = input_projection(p, g, cfg);
  for (Index l = 0; l < cfg.n_layers; ++l) {
    std::vector<AttentionRecord>* att = nullptr;
    if (trace) att = &trace->attention.emplace_back();
    h = hgt_layer(p, g, h, cfg, l, att);
  }
  return h;
}

Var mean_pool(const NodeEmbeddings& h, std::initializer_list<NodeType> sets) {
  std::vector<Var> parts;
  for (auto t : sets) parts.push_back(h.of(t));
  if (parts.size() == 1) return mean_rows(parts.front());
  return mean_rows(concat_rows(std::span<const Var>(parts)));
}

Var readout(const NodeEmbeddings& h, const EncoderConfig& cfg) {
  if (cfg.readout_includes_article) {
    if (h.article.rows() != 1) throw ShapeError("readout: expected one article embedding, got " +
                                                std::to_string(h.article.rows()));
    return concat_cols({h.article, mean_pool(h, {NodeType::post}), mean_pool(h, {NodeType::user})});
  }
  return concat_cols({mean_pool(h, {NodeType::post}), mean_pool(h, {NodeType::user})});
}

Var classify_logits(Bindings& p, const NodeEmbeddings& h, const EncoderConfig& cfg) {
  return linear(p, readout(h, cfg), "head.classify");
}

Var count_prediction(Bindings& p, const NodeEmbeddings& h, const EncoderConfig& cfg) {
  return linear(p, readout(h, cfg), "head.count");
}

Var reconstruct(Bindings& p, const Var& node_rows) { return linear(p, node_rows, "head.recon"); }

Var context_logit(Bindings& p, const Var& article_pool, const Var& context_pool) {
  return linear(p, concat_cols({article_pool, context_pool}), "head.context");
}

// ---------------------------------------------------------------------------
// Checkpoints

nlohmann::json checkpoint_to_json(const Checkpoint& ck) {
  nlohmann::json params = nlohmann::json::object();
  for (const auto& [name, p] : ck.params.tensors) {
    std::vector<double> data(p.value.data(), p.value.data() + p.value.size());
    params[name] = {{"shape", {p.value.rows(), p.value.cols()}}, {"data", std::move(data)}};
  }
  return {{"format_version", 1}, {"config", to_json(ck.config)}, {"params", std::move(params)},
          {"head_seed", ck.head_seed}};
}

Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  if (!j.is_object() || j.value("format_version", -1) != 1)
    throw CheckpointError("checkpoint: missing or unsupported format_version");
  Checkpoint ck;
  try {
    ck.config = encoder_config_from_json(j.at("config"));
    ck.head_seed = j.at("head_seed").get<std::uint64_t>();
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("checkpoint: ") + e.what());
  }
  const auto expected = shape_table(ck.config);
  if (!j.contains("params")) throw CheckpointError("checkpoint: missing params");
  const auto& params = j.at("params");
  if (!params.is_object()) throw CheckpointError("checkpoint: params must be an object");
  for (const auto& [name, shape] : expected) {
    if (!params.contains(name)) throw CheckpointError("checkpoint: missing parameter '" + name + "'");
    const auto& entry = params.at(name);
    if (!entry.is_object() || !entry.contains("shape") || !entry.contains("data"))
      throw CheckpointError("checkpoint: parameter '" + name + "' needs shape and data");
    const auto& s = entry.at("shape");
    if (!s.is_array() || s.size() != 2 || !s[0].is_number_integer() || !s[1].is_number_integer() ||
        s[0].get<Index>() != shape.first || s[1].get<Index>() != shape.second)
      throw CheckpointError("checkpoint: shape mismatch for '" + name + "': file " + s.dump() + ", config expects [" +
                            std::to_string(shape.first) + "," + std::to_string(shape.second) + "]");
    const auto& data = entry.at("data");
    if (!data.is_array() || static_cast<Index>(data.size()) != shape.first * shape.second)
      throw CheckpointError("checkpoint: data length mismatch for '" + name + "'");
    Matrix m(shape.first, shape.second);
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (!data[i].is_number()) throw CheckpointError("checkpoint: non-numeric data in '" + name + "'");
      m.data()[i] = data[i].get<double>();
    }
    ck.params.tensors.emplace(name, Param(std::move(m)));
  }
  for (const auto& [name, _] : params.items())
    if (!expected.contains(name)) throw CheckpointError("checkpoint: unexpected parameter '" + name + "'");
  return ck;
}

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw CheckpointError("cannot open " + path.string() + " for writing");
  out << checkpoint_to_json(ck).dump() << '\n';
  if (!out) throw CheckpointError("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path, bool head_reinit, std::optional<std::uint64_t> head_seed) {
  std::ifstream in(path);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw CheckpointError("checkpoint " + path.string() + ": " + e.what());
  }
  Checkpoint ck = checkpoint_from_json(j);
  if (head_reinit) {
    if (head_seed) ck.head_seed = *head_seed;
    reinit_heads(ck.params, ck.config, ck.head_seed);
  }
  return ck;
}

}  // namespace ctxgnn
