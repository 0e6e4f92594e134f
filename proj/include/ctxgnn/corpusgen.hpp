#pragma once

// Seeded synthetic stand-in for the social-context corpora: graph structure
// follows the article/post/user schema, features are class-conditional
// Gaussians.

#include "ctxgnn/hetgraph.hpp"

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>

namespace ctxgnn {

struct GenConfig {
  std::string name = "synthetic";
  std::uint64_t seed = 42;
  Index n_graphs = 100;
  Index feature_dim = 768;
  double label_balance = 0.5;
  std::pair<Index, Index> post_count_range{5, 60};
  std::pair<Index, Index> user_count_range{5, 50};
  double retweet_fraction_mean = 0.3;
  double timeline_fraction_mean = 0.2;
  double signal_strength = 2.0;
  double domain_shift = 0.0;
  // Shift of the retweet fraction between classes, scaled by
  // tanh(signal_strength) so a zero signal leaves labels independent of the
  // graph as well.
  bool retweet_label_coupling = true;
  double coupling_strength = 0.15;
  // Seeds the shared label and corpus directions. Corpora generated with the
  // same direction_seed share a label direction, so domain_shift alone
  // controls how far apart they are.
  std::uint64_t direction_seed = 0;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Throws ConfigError naming the first offending field.
void validate(const GenConfig& cfg);

Corpus generate(const GenConfig& cfg);

// pol_like (483), gos_like (12214), pol_tiny (100), gos_tiny (500).
const std::map<std::string, GenConfig>& presets();
GenConfig preset(const std::string& name);

nlohmann::json to_json(const GenConfig& cfg);
// Fields absent from `j` keep their value in `base`; unknown fields throw
// ConfigError.
GenConfig gen_config_from_json(const nlohmann::json& j, GenConfig base = {});

}  // namespace ctxgnn
