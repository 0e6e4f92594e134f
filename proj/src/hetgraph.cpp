#include "ctxgnn/hetgraph.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace ctxgnn {

std::string_view to_string(NodeType t) {
  switch (t) {
    case NodeType::article: return "article";
    case NodeType::post: return "post";
    case NodeType::user: return "user";
  }
  return "?";
}

std::string_view to_string(PostSubtype s) {
  switch (s) {
    case PostSubtype::tweet: return "tweet";
    case PostSubtype::retweet: return "retweet";
    case PostSubtype::timeline: return "timeline";
  }
  return "?";
}

std::optional<PostSubtype> parse_post_subtype(std::string_view s) {
  if (s == "tweet") return PostSubtype::tweet;
  if (s == "retweet") return PostSubtype::retweet;
  if (s == "timeline") return PostSubtype::timeline;
  return std::nullopt;
}

const std::array<EdgeTypeInfo, 5>& canonical_edge_types() {
  static const std::array<EdgeTypeInfo, 5> types{{
      {kTweetCitesArticle, NodeType::post, NodeType::article, PostSubtype::tweet, std::nullopt},
      {kUserPostsTweet, NodeType::user, NodeType::post, std::nullopt, PostSubtype::tweet},
      {kUserPostsRetweet, NodeType::user, NodeType::post, std::nullopt, PostSubtype::retweet},
      {kRetweetCitesTweet, NodeType::post, NodeType::post, PostSubtype::retweet, PostSubtype::tweet},
      {kUserPostsTimeline, NodeType::user, NodeType::post, std::nullopt, PostSubtype::timeline},
  }};
  return types;
}

const EdgeTypeInfo* find_canonical_edge_type(std::string_view name) {
  for (const auto& t : canonical_edge_types())
    if (t.name == name) return &t;
  return nullptr;
}

std::size_t HeteroGraph::num_edges() const {
  std::size_t n = 0;
  for (const auto& [_, list] : edges) n += list.size();
  return n;
}

const EdgeList& HeteroGraph::edges_of(std::string_view type) const {
  static const EdgeList empty;
  auto it = edges.find(std::string(type));
  return it == edges.end() ? empty : it->second;
}

bool same_shape_and_values(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && (a.size() == 0 || a == b);
}

bool operator==(const HeteroGraph& a, const HeteroGraph& b) {
  return a.id == b.id && a.label == b.label && same_shape_and_values(a.article_x, b.article_x) &&
         same_shape_and_values(a.post_x, b.post_x) && a.post_subtype == b.post_subtype &&
         same_shape_and_values(a.user_x, b.user_x) && a.edges == b.edges;
}

bool operator==(const Corpus& a, const Corpus& b) {
  return a.name == b.name && a.feature_dim == b.feature_dim && a.graphs == b.graphs && a.provenance == b.provenance;
}

namespace {

Index node_count(const HeteroGraph& g, NodeType t) {
  switch (t) {
    case NodeType::article: return g.article_x.rows();
    case NodeType::post: return g.num_posts();
    case NodeType::user: return g.num_users();
  }
  return 0;
}

void check_finite(const Matrix& m, const std::string& path, std::vector<Violation>& out) {
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c)
      if (!std::isfinite(m(r, c))) {
        out.push_back({path + "[" + std::to_string(r) + "][" + std::to_string(c) + "]", "non-finite feature value"});
        return;
      }
}

}  // namespace

std::vector<Violation> validate(const HeteroGraph& g, ValidateOptions options) {
  std::vector<Violation> out;
  const Index d = g.article_x.cols();
  const Index n_article = g.article_x.rows();
  if (n_article != 1 && !(options.context && n_article == 0))
    out.push_back({"article_x", "expected exactly one article node, found " + std::to_string(n_article)});
  if (g.post_x.cols() != d)
    out.push_back({"post_x", "feature dimension " + std::to_string(g.post_x.cols()) + " != " + std::to_string(d)});
  if (g.user_x.cols() != d)
    out.push_back({"user_x", "feature dimension " + std::to_string(g.user_x.cols()) + " != " + std::to_string(d)});
  if (static_cast<Index>(g.post_subtype.size()) != g.num_posts())
    out.push_back({"post_subtype", std::to_string(g.post_subtype.size()) + " subtypes for " +
                                       std::to_string(g.num_posts()) + " posts"});
  if (g.label && *g.label != 0 && *g.label != 1)
    out.push_back({"label", "label must be 0, 1 or null"});
  check_finite(g.article_x, "article_x", out);
  check_finite(g.post_x, "post_x", out);
  check_finite(g.user_x, "user_x", out);

  auto subtype_of = [&](Index i) -> std::optional<PostSubtype> {
    if (i < 0 || i >= static_cast<Index>(g.post_subtype.size())) return std::nullopt;
    return g.post_subtype[static_cast<std::size_t>(i)];
  };

  for (const auto& [name, list] : g.edges) {
    const EdgeTypeInfo* info = find_canonical_edge_type(name);
    if (!info) {
      out.push_back({"edges." + name, "unknown edge type"});
      continue;
    }
    const Index n_src = node_count(g, info->src), n_dst = node_count(g, info->dst);
    for (std::size_t k = 0; k < list.size(); ++k) {
      const auto& e = list[k];
      const std::string path = "edges." + name + "[" + std::to_string(k) + "]";
      if (e.src < 0 || e.src >= n_src) {
        out.push_back({path, "source index out of range: " + std::to_string(e.src) + " not in [0, " +
                                 std::to_string(n_src) + ")"});
      } else if (info->src_subtype && subtype_of(e.src) != info->src_subtype) {
        out.push_back({path, "source post " + std::to_string(e.src) + " must have subtype " +
                                 std::string(to_string(*info->src_subtype))});
      }
      if (e.dst < 0 || e.dst >= n_dst) {
        out.push_back({path, "target index out of range: " + std::to_string(e.dst) + " not in [0, " +
                                 std::to_string(n_dst) + ")"});
      } else if (info->dst_subtype && subtype_of(e.dst) != info->dst_subtype) {
        out.push_back({path, "target post " + std::to_string(e.dst) + " must have subtype " +
                                 std::string(to_string(*info->dst_subtype))});
      }
    }
  }
  return out;
}

HeteroGraph context_subgraph(const HeteroGraph& g) {
  HeteroGraph sub = g;
  sub.article_x.resize(0, g.article_x.cols());
  sub.edges.erase(std::string(kTweetCitesArticle));
  return sub;
}

Index retweet_count(const HeteroGraph& g) {
  Index n = 0;
  for (auto s : g.post_subtype) n += s == PostSubtype::retweet;
  return n;
}

std::vector<Violation> validate(const Corpus& c) {
  std::vector<Violation> out;
  std::set<std::string> ids;
  for (std::size_t k = 0; k < c.graphs.size(); ++k) {
    const auto& g = c.graphs[k];
    const std::string prefix = "graphs[" + std::to_string(k) + "]";
    if (!ids.insert(g.id).second) out.push_back({prefix + ".id", "duplicate graph id '" + g.id + "'"});
    if (g.feature_dim() != c.feature_dim)
      out.push_back({prefix, "feature dimension " + std::to_string(g.feature_dim()) + " != corpus " +
                                 std::to_string(c.feature_dim)});
    for (auto& v : validate(g)) out.push_back({prefix + "." + v.path, v.message});
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSONL

CorpusFormatError::CorpusFormatError(std::size_t line, std::string path, const std::string& message)
    : std::runtime_error("line " + std::to_string(line) + ": " + path + ": " + message),
      line_(line),
      path_(std::move(path)) {}

namespace {

nlohmann::json matrix_to_json(const Matrix& m) {
  auto rows = nlohmann::json::array();
  for (Index r = 0; r < m.rows(); ++r) {
    auto row = nlohmann::json::array();
    for (Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Matrix matrix_from_json(const nlohmann::json& j, Index cols, const std::string& path, std::size_t line) {
  if (!j.is_array()) throw CorpusFormatError(line, path, "expected an array of rows");
  Matrix m(static_cast<Index>(j.size()), cols);
  for (std::size_t r = 0; r < j.size(); ++r) {
    const auto& row = j[r];
    const std::string row_path = path + "[" + std::to_string(r) + "]";
    if (!row.is_array()) throw CorpusFormatError(line, row_path, "expected an array of numbers");
    if (static_cast<Index>(row.size()) != cols)
      throw CorpusFormatError(line, row_path,
                              "row has " + std::to_string(row.size()) + " values, header feature_dim is " +
                                  std::to_string(cols));
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (!row[c].is_number())
        throw CorpusFormatError(line, row_path + "[" + std::to_string(c) + "]", "expected a number");
      m(static_cast<Index>(r), static_cast<Index>(c)) = row[c].get<double>();
    }
  }
  return m;
}

}  // namespace

nlohmann::json graph_to_json(const HeteroGraph& g) {
  nlohmann::json j;
  j["id"] = g.id;
  j["label"] = g.label ? nlohmann::json(*g.label) : nlohmann::json(nullptr);
  j["article_x"] = matrix_to_json(g.article_x);
  j["post_x"] = matrix_to_json(g.post_x);
  auto subtypes = nlohmann::json::array();
  for (auto s : g.post_subtype) subtypes.push_back(std::string(to_string(s)));
  j["post_subtype"] = std::move(subtypes);
  j["user_x"] = matrix_to_json(g.user_x);
  auto edges = nlohmann::json::object();
  for (const auto& [name, list] : g.edges) {
    auto arr = nlohmann::json::array();
    for (const auto& e : list) arr.push_back({e.src, e.dst});
    edges[name] = std::move(arr);
  }
  j["edges"] = std::move(edges);
  return j;
}

HeteroGraph graph_from_json(const nlohmann::json& j, Index feature_dim, std::size_t graph_index, std::size_t line) {
  const std::string base = "graphs[" + std::to_string(graph_index) + "]";
  if (!j.is_object()) throw CorpusFormatError(line, base, "expected a JSON object");
  auto field = [&](const char* key) -> const nlohmann::json& {
    auto it = j.find(key);
    if (it == j.end()) throw CorpusFormatError(line, base + "." + key, "missing field");
    return *it;
  };
  HeteroGraph g;
  const auto& id = field("id");
  if (!id.is_string()) throw CorpusFormatError(line, base + ".id", "expected a string");
  g.id = id.get<std::string>();
  const auto& label = field("label");
  if (label.is_null()) {
    g.label = std::nullopt;
  } else if (label.is_number_integer() && (label.get<int>() == 0 || label.get<int>() == 1)) {
    g.label = label.get<int>();
  } else {
    throw CorpusFormatError(line, base + ".label", "expected 0, 1 or null");
  }
  g.article_x = matrix_from_json(field("article_x"), feature_dim, base + ".article_x", line);
  g.post_x = matrix_from_json(field("post_x"), feature_dim, base + ".post_x", line);
  g.user_x = matrix_from_json(field("user_x"), feature_dim, base + ".user_x", line);
  const auto& subtypes = field("post_subtype");
  if (!subtypes.is_array()) throw CorpusFormatError(line, base + ".post_subtype", "expected an array");
  for (std::size_t i = 0; i < subtypes.size(); ++i) {
    const auto& s = subtypes[i];
    auto parsed = s.is_string() ? parse_post_subtype(s.get<std::string>()) : std::nullopt;
    if (!parsed)
      throw CorpusFormatError(line, base + ".post_subtype[" + std::to_string(i) + "]",
                              "expected \"tweet\", \"retweet\" or \"timeline\"");
    g.post_subtype.push_back(*parsed);
  }
  const auto& edges = field("edges");
  if (!edges.is_object()) throw CorpusFormatError(line, base + ".edges", "expected an object");
  for (const auto& [name, arr] : edges.items()) {
    const std::string path = base + ".edges." + name;
    if (!arr.is_array()) throw CorpusFormatError(line, path, "expected an array of [src, dst] pairs");
    EdgeList list;
    for (std::size_t k = 0; k < arr.size(); ++k) {
      const auto& e = arr[k];
      if (!e.is_array() || e.size() != 2 || !e[0].is_number_integer() || !e[1].is_number_integer())
        throw CorpusFormatError(line, path + "[" + std::to_string(k) + "]", "expected [src, dst] integers");
      list.push_back({e[0].get<Index>(), e[1].get<Index>()});
    }
    g.edges.emplace(name, std::move(list));
  }
  return g;
}

void write_corpus(const Corpus& c, std::ostream& out) {
  nlohmann::json header{{"format_version", 1},
                        {"name", c.name},
                        {"feature_dim", c.feature_dim},
                        {"count", c.graphs.size()},
                        {"provenance", c.provenance}};
  out << header.dump() << '\n';
  for (const auto& g : c.graphs) out << graph_to_json(g).dump() << '\n';
}

void write_corpus(const Corpus& c, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_corpus(c, out);
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

Corpus read_corpus(std::istream& in) {
  std::string text;
  std::size_t line_no = 0;
  auto parse_line = [&](const std::string& path) {
    try {
      return nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw CorpusFormatError(line_no, path, std::string("invalid JSON: ") + e.what());
    }
  };
  if (!std::getline(in, text)) throw CorpusFormatError(1, "header", "empty file");
  line_no = 1;
  const auto header = parse_line("header");
  if (!header.is_object()) throw CorpusFormatError(1, "header", "expected a JSON object");
  if (header.value("format_version", -1) != 1) throw CorpusFormatError(1, "header.format_version", "expected 1");
  Corpus c;
  if (!header.contains("name") || !header["name"].is_string())
    throw CorpusFormatError(1, "header.name", "expected a string");
  c.name = header["name"].get<std::string>();
  if (!header.contains("feature_dim") || !header["feature_dim"].is_number_unsigned())
    throw CorpusFormatError(1, "header.feature_dim", "expected a non-negative integer");
  c.feature_dim = header["feature_dim"].get<Index>();
  if (!header.contains("count") || !header["count"].is_number_unsigned())
    throw CorpusFormatError(1, "header.count", "expected a non-negative integer");
  const auto count = header["count"].get<std::size_t>();
  if (header.contains("provenance")) c.provenance = header["provenance"];

  while (std::getline(in, text)) {
    ++line_no;
    if (text.empty()) continue;
    const std::size_t k = c.graphs.size();
    const auto j = parse_line("graphs[" + std::to_string(k) + "]");
    c.graphs.push_back(graph_from_json(j, c.feature_dim, k, line_no));
  }
  if (c.graphs.size() != count)
    throw CorpusFormatError(line_no, "header.count",
                            "header declares " + std::to_string(count) + " graphs, file holds " +
                                std::to_string(c.graphs.size()));
  for (std::size_t k = 0; k < c.graphs.size(); ++k) {
    auto violations = validate(c.graphs[k]);
    if (!violations.empty())
      throw CorpusFormatError(k + 2, "graphs[" + std::to_string(k) + "]." + violations.front().path,
                              violations.front().message);
  }
  auto corpus_violations = validate(c);
  if (!corpus_violations.empty())
    throw CorpusFormatError(0, corpus_violations.front().path, corpus_violations.front().message);
  return c;
}

Corpus read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open corpus file " + path.string());
  return read_corpus(in);
}

}  // namespace ctxgnn
