#pragma once

// Article-centred social-context graphs: one news article, a shared post node
// set (tweets, retweets and timeline tweets tagged by subtype) and a user node
// set, linked by five typed edge lists.

#include "ctxgnn/numerics.hpp"

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace ctxgnn {

enum class NodeType { article, post, user };
enum class PostSubtype { tweet, retweet, timeline };

std::string_view to_string(NodeType t);
std::string_view to_string(PostSubtype s);
std::optional<PostSubtype> parse_post_subtype(std::string_view s);

struct Edge {
  Index src = 0;
  Index dst = 0;
  friend bool operator==(const Edge&, const Edge&) = default;
};

using EdgeList = std::vector<Edge>;

struct EdgeTypeInfo {
  std::string_view name;
  NodeType src;
  NodeType dst;
  // Required subtype of a post endpoint, if the type constrains one.
  std::optional<PostSubtype> src_subtype;
  std::optional<PostSubtype> dst_subtype;
};

inline constexpr std::string_view kTweetCitesArticle = "tweet_cites_article";
inline constexpr std::string_view kUserPostsTweet = "user_posts_tweet";
inline constexpr std::string_view kUserPostsRetweet = "user_posts_retweet";
inline constexpr std::string_view kRetweetCitesTweet = "retweet_cites_tweet";
inline constexpr std::string_view kUserPostsTimeline = "user_posts_timeline";
inline constexpr std::string_view kReversePrefix = "rev_";

const std::array<EdgeTypeInfo, 5>& canonical_edge_types();
const EdgeTypeInfo* find_canonical_edge_type(std::string_view name);

struct HeteroGraph {
  std::string id;
  std::optional<int> label;  // 0 = real, 1 = fake
  Matrix article_x;          // 1 x d, or 0 x d for a context subgraph
  Matrix post_x;
  std::vector<PostSubtype> post_subtype;
  Matrix user_x;
  std::map<std::string, EdgeList> edges;

  Index feature_dim() const { return article_x.cols(); }
  Index num_posts() const { return post_x.rows(); }
  Index num_users() const { return user_x.rows(); }
  std::size_t num_edges() const;
  const EdgeList& edges_of(std::string_view type) const;
};

// Structural equality with bit-exact feature comparison.
bool operator==(const HeteroGraph& a, const HeteroGraph& b);
bool same_shape_and_values(const Matrix& a, const Matrix& b);

struct Violation {
  std::string path;
  std::string message;
};

struct ValidateOptions {
  // Accept an empty article set (context subgraphs).
  bool context = false;
};

// Every broken invariant, with index-level paths. Empty means valid.
std::vector<Violation> validate(const HeteroGraph& g, ValidateOptions options = {});

// The graph with the article node and every tweet_cites_article edge removed.
HeteroGraph context_subgraph(const HeteroGraph& g);

// Metadata only: never part of encoder input.
Index retweet_count(const HeteroGraph& g);

struct Corpus {
  std::string name;
  Index feature_dim = 0;
  std::vector<HeteroGraph> graphs;
  nlohmann::json provenance = nlohmann::json::object();
};

bool operator==(const Corpus& a, const Corpus& b);

// Fails on non-uniform feature dimensions or duplicate ids, and on any graph
// violation.
std::vector<Violation> validate(const Corpus& c);

class CorpusFormatError : public std::runtime_error {
 public:
  CorpusFormatError(std::size_t line, std::string path, const std::string& message);
  std::size_t line() const { return line_; }
  const std::string& path() const { return path_; }

 private:
  std::size_t line_;
  std::string path_;
};

nlohmann::json graph_to_json(const HeteroGraph& g);
// `graph_index` only feeds error paths (graphs[k]...).
HeteroGraph graph_from_json(const nlohmann::json& j, Index feature_dim, std::size_t graph_index, std::size_t line);

void write_corpus(const Corpus& c, std::ostream& out);
void write_corpus(const Corpus& c, const std::filesystem::path& path);
Corpus read_corpus(std::istream& in);
Corpus read_corpus(const std::filesystem::path& path);

}  // namespace ctxgnn
