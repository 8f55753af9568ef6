#include "lovis/world.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <queue>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "lovis/errors.hpp"

namespace lovis {

using nlohmann::json;

const std::vector<std::string> kDirectionWords = {"left", "right", "straight", "up", "down"};

const std::vector<std::string> kLandmarkWords = {
    "sofa",    "table",   "chair",    "bed",      "lamp",     "door",     "window",  "stairs",
    "sink",    "toilet",  "bathtub",  "shower",   "fridge",   "oven",     "counter", "cabinet",
    "shelf",   "desk",    "piano",    "fireplace", "mirror",  "painting", "plant",   "rug",
    "tv",      "closet",  "dresser",  "bench",    "curtain",  "vase",     "clock",   "bookcase",
    "armchair", "washer", "dryer",    "pillar",   "railing",  "fountain", "statue",  "archway"};

namespace {

const std::vector<std::string> kTemplateWords = {"turn", "and", "walk", "to", "the", "stop", "at", "."};

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) { return splitmix(a ^ splitmix(b)); }

std::size_t elevation_row(int elevation_deg) {
  if (elevation_deg < 0) return 0;
  if (elevation_deg > 0) return 2;
  return 1;
}

std::vector<std::size_t> hop_counts(const House& house, std::size_t start) {
  // Hops along the metric shortest path (tie rule included), not BFS hops.
  std::vector<std::size_t> hops(house.size(), 0);
  for (std::size_t g = 0; g < house.size(); ++g) hops[g] = shortest_path(house, start, g).size() - 1;
  return hops;
}

}  // namespace

double wrap_angle(double radians) {
  double a = std::fmod(radians, 2.0 * kPi);
  if (a <= -kPi) a += 2.0 * kPi;
  if (a > kPi) a -= 2.0 * kPi;
  return a;
}

std::string to_string(DatasetStyle style) { return style == DatasetStyle::kR2R ? "r2r" : "r4r"; }

DatasetStyle parse_style(const std::string& s) {
  if (s == "r2r") return DatasetStyle::kR2R;
  if (s == "r4r") return DatasetStyle::kR4R;
  throw ConfigError("unknown dataset style '" + s + "' (expected r2r or r4r)");
}

// ---------------------------------------------------------------------------
// House

void House::finalize() {
  const std::size_t n = viewpoints.size();
  for (std::size_t i = 0; i < n; ++i) {
    if (viewpoints[i].id != i) throw DataError("house " + std::to_string(id) + ": viewpoint ids must be 0..n-1");
  }
  adjacency_.assign(n, {});
  for (const Edge& e : edges) {
    if (e.a >= n || e.b >= n || e.a == e.b) throw DataError("house " + std::to_string(id) + ": invalid edge");
    const auto& pa = viewpoints[e.a];
    const auto& pb = viewpoints[e.b];
    const double len = std::hypot(pb.x - pa.x, pb.y - pa.y);
    const double h_ab = std::atan2(pb.y - pa.y, pb.x - pa.x);
    adjacency_[e.a].push_back({e.b, len, e.elevation_deg, h_ab});
    adjacency_[e.b].push_back({e.a, len, -e.elevation_deg, wrap_angle(h_ab + kPi)});
  }
  for (auto& adj : adjacency_) {
    std::sort(adj.begin(), adj.end(), [](const Neighbor& l, const Neighbor& r) { return l.id < r.id; });
  }

  distances_.assign(n * n, std::numeric_limits<double>::infinity());
  for (std::size_t s = 0; s < n; ++s) {
    double* dist = distances_.data() + s * n;
    dist[s] = 0.0;
    using Item = std::pair<double, std::size_t>;
    std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
    pq.push({0.0, s});
    while (!pq.empty()) {
      auto [d, u] = pq.top();
      pq.pop();
      if (d > dist[u]) continue;
      for (const auto& nb : adjacency_[u]) {
        const double nd = d + nb.length;
        if (nd < dist[nb.id]) {
          dist[nb.id] = nd;
          pq.push({nd, nb.id});
        }
      }
    }
  }
  // Per-source sums can differ in the last bit; keep the metric exactly symmetric.
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = a + 1; b < n; ++b) distances_[b * n + a] = distances_[a * n + b];
  basis_ = landmark_basis(basis_seed, kLandmarkWords.size(), vision_dim);
}

const std::vector<Neighbor>& House::neighbors(std::size_t vp) const {
  if (vp >= adjacency_.size()) throw GraphError("viewpoint " + std::to_string(vp) + " does not exist");
  return adjacency_[vp];
}

std::optional<Neighbor> House::edge(std::size_t from, std::size_t to) const {
  for (const auto& nb : neighbors(from))
    if (nb.id == to) return nb;
  return std::nullopt;
}

double House::distance(std::size_t a, std::size_t b) const {
  const std::size_t n = viewpoints.size();
  if (a >= n || b >= n) throw GraphError("distance: viewpoint out of range");
  return distances_[a * n + b];
}

const std::vector<double>& House::basis(std::size_t landmark) const { return basis_.at(landmark); }

std::vector<std::vector<double>> landmark_basis(std::uint64_t seed, std::size_t count, std::size_t dim) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::vector<double>> basis;
  // Gram-Schmidt over Gaussian draws; orthonormal while count ≤ dim.
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<double> v(dim);
    for (double& x : v) x = normal(rng);
    if (i < dim) {
      for (const auto& u : basis) {
        const double proj = std::inner_product(v.begin(), v.end(), u.begin(), 0.0);
        for (std::size_t j = 0; j < dim; ++j) v[j] -= proj * u[j];
      }
    }
    const double norm = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
    for (double& x : v) x /= norm;
    basis.push_back(std::move(v));
  }
  return basis;
}

House generate_house(std::uint64_t seed, std::size_t n_viewpoints, const WorldConfig& config) {
  if (n_viewpoints < 4) throw ContractError("generate_house: need at least 4 viewpoints");
  std::mt19937_64 rng(mix_seed(seed, 0x4057ULL));
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  House house;
  house.basis_seed = config.basis_seed;
  house.noise_seed = mix_seed(seed, 0x5EEDULL);
  house.noise_sigma = config.noise_sigma;
  house.vision_dim = config.vision_dim;

  constexpr double kMinLen = 1.5, kMaxLen = 4.0;
  house.viewpoints.push_back({0, 0.0, 0.0, {}});
  std::size_t attempts = 0;
  while (house.viewpoints.size() < n_viewpoints) {
    if (++attempts > 100000) throw DataError("generate_house: could not place viewpoints");
    const std::size_t parent = static_cast<std::size_t>(unit(rng) * house.viewpoints.size());
    const double angle = unit(rng) * 2.0 * kPi;
    const double radius = 2.0 + unit(rng) * 1.5;
    const double x = house.viewpoints[parent].x + radius * std::cos(angle);
    const double y = house.viewpoints[parent].y + radius * std::sin(angle);
    bool clear = true;
    for (const auto& v : house.viewpoints) {
      if (std::hypot(v.x - x, v.y - y) < 1.8) {
        clear = false;
        break;
      }
    }
    if (!clear) continue;
    const std::size_t id = house.viewpoints.size();
    house.viewpoints.push_back({id, x, y, {}});
    house.edges.push_back({parent, id, 0});
  }

  std::set<std::pair<std::size_t, std::size_t>> present;
  for (const auto& e : house.edges) present.insert({std::min(e.a, e.b), std::max(e.a, e.b)});
  for (std::size_t i = 0; i < n_viewpoints; ++i) {
    for (std::size_t j = i + 1; j < n_viewpoints; ++j) {
      if (present.count({i, j})) continue;
      const auto& a = house.viewpoints[i];
      const auto& b = house.viewpoints[j];
      const double len = std::hypot(a.x - b.x, a.y - b.y);
      if (len >= kMinLen && len <= kMaxLen && unit(rng) < config.extra_edge_probability) {
        house.edges.push_back({i, j, 0});
        present.insert({i, j});
      }
    }
  }
  for (auto& e : house.edges) {
    if (unit(rng) < config.stairs_probability) e.elevation_deg = unit(rng) < 0.5 ? 30 : -30;
  }

  // Landmarks avoid repeating any already assigned to an adjacent viewpoint.
  std::vector<std::vector<std::size_t>> adj(n_viewpoints);
  for (const auto& e : house.edges) {
    adj[e.a].push_back(e.b);
    adj[e.b].push_back(e.a);
  }
  const std::size_t n_landmarks = kLandmarkWords.size();
  for (auto& vp : house.viewpoints) {
    const std::size_t count = 1 + static_cast<std::size_t>(unit(rng) * 3.0);
    std::set<std::size_t> banned;
    for (std::size_t nb : adj[vp.id])
      for (std::size_t l : house.viewpoints[nb].landmarks) banned.insert(l);
    std::vector<std::size_t> pool;
    for (std::size_t l = 0; l < n_landmarks; ++l)
      if (!banned.count(l)) pool.push_back(l);
    std::shuffle(pool.begin(), pool.end(), rng);
    vp.landmarks.assign(pool.begin(), pool.begin() + std::min(count, pool.size()));
    std::sort(vp.landmarks.begin(), vp.landmarks.end());
  }
  house.finalize();
  return house;
}

RelativePose relative_pose(const House& house, std::size_t from, std::size_t to, double agent_heading) {
  const auto e = house.edge(from, to);
  if (!e) {
    throw GraphError("relative_pose: no edge between viewpoints " + std::to_string(from) + " and " +
                     std::to_string(to));
  }
  return {wrap_angle(e->heading - agent_heading), deg2rad(e->elevation_deg), e->length};
}

std::vector<double> orientation_feature(double alpha, double beta) {
  const double block[4] = {std::sin(alpha), std::cos(alpha), std::sin(beta), std::cos(beta)};
  std::vector<double> out(kOrientationDim);
  for (std::size_t j = 0; j < kOrientationRepeats; ++j) std::copy_n(block, 4, out.begin() + 4 * j);
  return out;
}

std::size_t heading_bucket(double heading) {
  const double width = 2.0 * kPi / static_cast<double>(kHeadingBuckets);
  double a = std::fmod(heading + width / 2.0, 2.0 * kPi);
  if (a < 0) a += 2.0 * kPi;
  return static_cast<std::size_t>(a / width) % kHeadingBuckets;
}

std::size_t sector_index(double heading, int elevation_deg) {
  return elevation_row(elevation_deg) * kHeadingBuckets + heading_bucket(heading);
}

std::vector<std::size_t> sector_landmarks(const House& house, std::size_t vp, std::size_t sector) {
  if (sector >= kSectors) throw IndexError("sector " + std::to_string(sector) + " out of range 0..35");
  std::set<std::size_t> visible;
  for (const auto& nb : house.neighbors(vp)) {
    if (sector_index(nb.heading, nb.elevation_deg) == sector) {
      for (std::size_t l : house.viewpoints[nb.id].landmarks) visible.insert(l);
    }
  }
  if (sector / kHeadingBuckets == 0) {
    for (std::size_t l : house.viewpoints[vp].landmarks) visible.insert(l);
  }
  return {visible.begin(), visible.end()};
}

std::vector<double> vision_feature(const House& house, std::size_t vp, std::size_t sector) {
  const std::size_t dim = house.vision_dim;
  std::vector<double> out(dim, 0.0);
  const auto visible = sector_landmarks(house, vp, sector);
  for (std::size_t l : visible) {
    const auto& b = house.basis(l);
    for (std::size_t j = 0; j < dim; ++j) out[j] += b[j];
  }
  const double norm = std::sqrt(std::inner_product(out.begin(), out.end(), out.begin(), 0.0));
  if (norm > 0.0)
    for (double& x : out) x /= norm;
  if (house.noise_sigma > 0.0) {
    std::mt19937_64 rng(mix_seed(house.noise_seed, vp * kSectors + sector));
    std::normal_distribution<double> noise(0.0, house.noise_sigma);
    for (double& x : out) x += noise(rng);
  }
  return out;
}

Panorama panorama(const House& house, std::size_t vp) {
  Panorama p;
  for (std::size_t s = 0; s < kSectors; ++s) p.sectors[s] = vision_feature(house, vp, s);
  return p;
}

std::optional<std::size_t> CandidateSet::index_of(std::size_t viewpoint) const {
  for (std::size_t i = 1; i < items.size(); ++i)
    if (items[i].viewpoint == viewpoint) return i;
  return std::nullopt;
}

CandidateSet build_candidates(const House& house, std::size_t vp, double heading) {
  CandidateSet set;
  set.items.push_back({vp, 0.0, 0.0, heading, 0.0, vision_feature(house, vp, sector_index(heading, -30)),
                       orientation_feature(0.0, 0.0)});
  for (const auto& nb : house.neighbors(vp)) {
    const double alpha = wrap_angle(nb.heading - heading);
    const double beta = deg2rad(nb.elevation_deg);
    set.items.push_back({nb.id, alpha, beta, nb.heading, nb.length,
                         vision_feature(house, vp, sector_index(nb.heading, nb.elevation_deg)),
                         orientation_feature(alpha, beta)});
  }
  return set;
}

std::vector<std::size_t> shortest_path(const House& house, std::size_t start, std::size_t goal) {
  if (start >= house.size() || goal >= house.size()) throw GraphError("shortest_path: viewpoint out of range");
  if (!std::isfinite(house.distance(start, goal))) {
    throw GraphError("shortest_path: goal " + std::to_string(goal) + " unreachable from " + std::to_string(start));
  }
  std::vector<std::size_t> path{start};
  std::size_t cur = start;
  while (cur != goal) {
    const double remaining = house.distance(cur, goal);
    std::optional<std::size_t> next;
    for (const auto& nb : house.neighbors(cur)) {  // ascending id
      if (std::abs(nb.length + house.distance(nb.id, goal) - remaining) <= 1e-9) {
        next = nb.id;
        break;
      }
    }
    if (!next) throw GraphError("shortest_path: inconsistent distance table");
    cur = *next;
    path.push_back(cur);
  }
  return path;
}

double path_length(const House& house, const std::vector<std::size_t>& path) {
  double total = 0.0;
  for (std::size_t i = 1; i < path.size(); ++i) {
    if (path[i] == path[i - 1]) continue;
    const auto e = house.edge(path[i - 1], path[i]);
    total += e ? e->length : house.distance(path[i - 1], path[i]);
  }
  return total;
}

// ---------------------------------------------------------------------------
// Language

Vocabulary Vocabulary::standard() {
  Vocabulary v;
  v.tokens_ = {"[PAD]", "[CLS]", "[SEP]", "[MASK]"};
  v.tokens_.insert(v.tokens_.end(), kTemplateWords.begin(), kTemplateWords.end());
  v.first_direction_ = v.tokens_.size();
  v.tokens_.insert(v.tokens_.end(), kDirectionWords.begin(), kDirectionWords.end());
  v.first_landmark_ = v.tokens_.size();
  v.tokens_.insert(v.tokens_.end(), kLandmarkWords.begin(), kLandmarkWords.end());
  for (std::size_t i = 0; i < v.tokens_.size(); ++i) v.index_[v.tokens_[i]] = i;
  return v;
}

std::size_t Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  if (it == index_.end()) throw DataError("vocabulary: unknown token '" + token + "'");
  return it->second;
}

bool Vocabulary::is_direction(std::size_t id) const {
  return id >= first_direction_ && id < first_direction_ + kDirectionWords.size();
}

bool Vocabulary::is_landmark(std::size_t id) const {
  return id >= first_landmark_ && id < first_landmark_ + kLandmarkWords.size();
}

std::size_t Vocabulary::landmark_token(std::size_t landmark) const { return first_landmark_ + landmark; }

std::string direction_word(double alpha, double beta) {
  if (beta > 1e-9) return "up";
  if (beta < -1e-9) return "down";
  if (std::abs(alpha) < deg2rad(30.0)) return "straight";
  return alpha > 0 ? "left" : "right";
}

std::vector<std::string> generate_instruction(const House& house, const std::vector<std::size_t>& path,
                                              std::uint64_t seed, double initial_heading) {
  if (path.size() < 2) throw ContractError("generate_instruction: path needs at least one hop");
  std::mt19937_64 rng(mix_seed(seed, 0x1257ULL));
  std::vector<std::string> out;
  double heading = initial_heading;
  std::string landmark;
  for (std::size_t i = 1; i < path.size(); ++i) {
    const auto pose = relative_pose(house, path[i - 1], path[i], heading);
    const auto& marks = house.viewpoints[path[i]].landmarks;
    landmark = kLandmarkWords[marks[static_cast<std::size_t>(rng() % marks.size())]];
    for (const char* w : {"turn"}) out.emplace_back(w);
    out.push_back(direction_word(pose.alpha, pose.beta));
    for (const char* w : {"and", "walk", "to", "the"}) out.emplace_back(w);
    out.push_back(landmark);
    out.emplace_back(".");
    heading = house.edge(path[i - 1], path[i])->heading;
  }
  for (const char* w : {"stop", "at", "the"}) out.emplace_back(w);
  out.push_back(landmark);
  out.emplace_back(".");
  return out;
}

ParsedInstruction parse_instruction(const std::vector<std::string>& tokens) {
  ParsedInstruction parsed;
  std::size_t i = 0;
  auto expect = [&](const std::string& w) {
    if (i >= tokens.size() || tokens[i] != w) {
      throw DataError("parse_instruction: expected '" + w + "' at token " + std::to_string(i));
    }
    ++i;
  };
  while (i < tokens.size() && tokens[i] == "turn") {
    ++i;
    if (i >= tokens.size()) throw DataError("parse_instruction: truncated clause");
    HopDescriptor hop;
    hop.direction = tokens[i++];
    expect("and");
    expect("walk");
    expect("to");
    expect("the");
    if (i >= tokens.size()) throw DataError("parse_instruction: truncated clause");
    hop.landmark = tokens[i++];
    expect(".");
    parsed.hops.push_back(std::move(hop));
  }
  expect("stop");
  expect("at");
  expect("the");
  if (i >= tokens.size()) throw DataError("parse_instruction: missing stop landmark");
  parsed.stop_landmark = tokens[i++];
  expect(".");
  if (i != tokens.size()) throw DataError("parse_instruction: trailing tokens");
  return parsed;
}

std::vector<std::string> split_tokens(const std::string& text) {
  std::istringstream is(text);
  std::vector<std::string> out;
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Datasets

const House& Dataset::house(std::size_t id) const {
  if (id >= houses.size()) throw DataError("dataset: unknown house " + std::to_string(id));
  return houses[id];
}

const std::vector<Episode>& Dataset::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "val_seen") return val_seen;
  if (name == "val_unseen") return val_unseen;
  throw ConfigError("unknown split '" + name + "' (expected train, val_seen or val_unseen)");
}

PathLimits r2r_hop_limits() {
  // Seven hops would exceed the 60-token instruction budget.
  return {4, 6};
}

namespace {

struct EpisodeSampler {
  const House& house;
  DatasetStyle style;
  std::mt19937_64& rng;
  std::vector<std::vector<std::size_t>> hops;  // hops[s][g]

  EpisodeSampler(const House& h, DatasetStyle st, std::mt19937_64& r) : house(h), style(st), rng(r) {
    for (std::size_t s = 0; s < house.size(); ++s) hops.push_back(hop_counts(house, s));
  }

  std::size_t pick(std::size_t n) { return static_cast<std::size_t>(rng() % n); }

  std::optional<std::vector<std::size_t>> r2r_path() {
    const auto lim = r2r_hop_limits();
    for (int tries = 0; tries < 1000; ++tries) {
      const std::size_t s = pick(house.size());
      std::vector<std::size_t> goals;
      for (std::size_t g = 0; g < house.size(); ++g)
        if (hops[s][g] >= lim.min_hops && hops[s][g] <= lim.max_hops) goals.push_back(g);
      if (goals.empty()) continue;
      return shortest_path(house, s, goals[pick(goals.size())]);
    }
    return std::nullopt;
  }

  // Two tail-to-head shortest segments of 2–3 hops; the joined path must not
  // revisit a viewpoint. Joined paths that happen to be shortest are kept
  // only occasionally.
  std::optional<std::vector<std::size_t>> r4r_path() {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (int tries = 0; tries < 5000; ++tries) {
      const std::size_t s = pick(house.size());
      std::vector<std::size_t> mids;
      for (std::size_t g = 0; g < house.size(); ++g)
        if (hops[s][g] >= 2 && hops[s][g] <= 3) mids.push_back(g);
      if (mids.empty()) continue;
      const std::size_t mid = mids[pick(mids.size())];
      std::vector<std::size_t> ends;
      for (std::size_t g = 0; g < house.size(); ++g)
        if (hops[mid][g] >= 2 && hops[mid][g] <= 3) ends.push_back(g);
      if (ends.empty()) continue;
      const std::size_t end = ends[pick(ends.size())];
      auto first = shortest_path(house, s, mid);
      auto second = shortest_path(house, mid, end);
      std::vector<std::size_t> joined = first;
      joined.insert(joined.end(), second.begin() + 1, second.end());
      std::set<std::size_t> uniq(joined.begin(), joined.end());
      if (uniq.size() != joined.size()) continue;
      const bool is_shortest = std::abs(path_length(house, joined) - house.distance(s, end)) < 1e-9;
      if (is_shortest && unit(rng) > 0.2) continue;
      return joined;
    }
    return std::nullopt;
  }

  std::optional<std::vector<std::size_t>> path() { return style == DatasetStyle::kR2R ? r2r_path() : r4r_path(); }
};

Episode make_episode(const House& house, std::vector<std::size_t> path, std::uint64_t seed) {
  Episode ep;
  ep.house_id = house.id;
  ep.goal = path.back();
  ep.instruction = generate_instruction(house, path, seed, 0.0);
  ep.path = std::move(path);
  return ep;
}

}  // namespace

Dataset make_dataset(std::size_t n_houses, std::size_t episodes_per_house, std::uint64_t seed, DatasetStyle style,
                     const WorldConfig& world) {
  if (n_houses < 3) throw ContractError("make_dataset: need at least 3 houses");
  Dataset ds;
  ds.style = style;
  ds.seed = seed;
  ds.world = world;
  const std::size_t n_unseen =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(n_houses) / 5.0)));
  for (std::size_t h = 0; h < n_houses; ++h) {
    House house = generate_house(mix_seed(seed, h), world.viewpoints, world);
    house.id = h;
    ds.houses.push_back(std::move(house));
    (h + n_unseen < n_houses ? ds.train_houses : ds.unseen_houses).push_back(h);
  }

  const std::size_t seen_per_house = std::max<std::size_t>(1, episodes_per_house / 10);
  for (std::size_t h = 0; h < n_houses; ++h) {
    const House& house = ds.houses[h];
    std::mt19937_64 rng(mix_seed(seed, 0xE915ULL + h));
    EpisodeSampler sampler(house, style, rng);
    const bool unseen = std::find(ds.unseen_houses.begin(), ds.unseen_houses.end(), h) != ds.unseen_houses.end();
    std::set<std::pair<std::size_t, std::size_t>> used;
    auto& target = unseen ? ds.val_unseen : ds.train;
    for (std::size_t e = 0; e < episodes_per_house; ++e) {
      auto path = sampler.path();
      if (!path) throw DataError("make_dataset: house " + std::to_string(h) + " has no valid paths");
      used.insert({path->front(), path->back()});
      target.push_back(make_episode(house, std::move(*path), rng()));
    }
    if (unseen) continue;
    for (std::size_t e = 0; e < seen_per_house; ++e) {
      std::optional<std::vector<std::size_t>> path;
      for (int tries = 0; tries < 200; ++tries) {
        path = sampler.path();
        if (path && !used.count({path->front(), path->back()})) break;
      }
      if (!path) throw DataError("make_dataset: house " + std::to_string(h) + " has no valid paths");
      used.insert({path->front(), path->back()});
      ds.val_seen.push_back(make_episode(house, std::move(*path), rng()));
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Serialization

std::string house_to_json(const House& house) {
  json j;
  j["id"] = house.id;
  j["basis_seed"] = house.basis_seed;
  j["noise_seed"] = house.noise_seed;
  j["noise_sigma"] = house.noise_sigma;
  j["vision_dim"] = house.vision_dim;
  json vps = json::array();
  for (const auto& v : house.viewpoints) {
    json names = json::array();
    for (std::size_t l : v.landmarks) names.push_back(kLandmarkWords[l]);
    vps.push_back({{"id", v.id}, {"x", v.x}, {"y", v.y}, {"landmarks", v.landmarks}, {"landmark_names", names}});
  }
  j["viewpoints"] = vps;
  json edges = json::array();
  for (const auto& e : house.edges) edges.push_back({{"a", e.a}, {"b", e.b}, {"elevation", e.elevation_deg}});
  j["edges"] = edges;
  return j.dump(1);
}

House house_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    House house;
    house.id = j.at("id").get<std::size_t>();
    house.basis_seed = j.at("basis_seed").get<std::uint64_t>();
    house.noise_seed = j.at("noise_seed").get<std::uint64_t>();
    house.noise_sigma = j.at("noise_sigma").get<double>();
    house.vision_dim = j.at("vision_dim").get<std::size_t>();
    for (const auto& v : j.at("viewpoints")) {
      house.viewpoints.push_back({v.at("id").get<std::size_t>(), v.at("x").get<double>(), v.at("y").get<double>(),
                                  v.at("landmarks").get<std::vector<std::size_t>>()});
    }
    for (const auto& e : j.at("edges")) {
      house.edges.push_back({e.at("a").get<std::size_t>(), e.at("b").get<std::size_t>(), e.at("elevation").get<int>()});
    }
    house.finalize();
    return house;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed house file: ") + e.what());
  }
}

std::string episode_to_json(const Episode& episode) {
  json j;
  j["house_id"] = episode.house_id;
  j["instruction"] = join_tokens(episode.instruction);
  j["path"] = episode.path;
  j["goal"] = episode.goal;
  return j.dump();
}

Episode episode_from_json(const std::string& line) {
  try {
    const json j = json::parse(line);
    Episode ep;
    ep.house_id = j.at("house_id").get<std::size_t>();
    ep.instruction = split_tokens(j.at("instruction").get<std::string>());
    ep.path = j.at("path").get<std::vector<std::size_t>>();
    ep.goal = j.at("goal").get<std::size_t>();
    if (ep.path.empty()) throw DataError("episode with empty path");
    return ep;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed episode record: ") + e.what());
  }
}

namespace {

void write_lines(const std::filesystem::path& path, const std::vector<Episode>& episodes) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& ep : episodes) out << episode_to_json(ep) << '\n';
}

std::vector<Episode> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  std::vector<Episode> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(episode_from_json(line));
  }
  return out;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace

void write_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "houses");
  for (const auto& h : dataset.houses) {
    std::ofstream out(dir / "houses" / ("house_" + std::to_string(h.id) + ".json"), std::ios::trunc);
    if (!out) throw DataError("cannot write house files under " + dir.string());
    out << house_to_json(h) << '\n';
  }
  write_lines(dir / "train.jsonl", dataset.train);
  write_lines(dir / "val_seen.jsonl", dataset.val_seen);
  write_lines(dir / "val_unseen.jsonl", dataset.val_unseen);

  json meta;
  meta["style"] = to_string(dataset.style);
  meta["seed"] = dataset.seed;
  meta["houses"] = dataset.houses.size();
  meta["train_houses"] = dataset.train_houses;
  meta["unseen_houses"] = dataset.unseen_houses;
  meta["viewpoints"] = dataset.world.viewpoints;
  meta["vision_dim"] = dataset.world.vision_dim;
  meta["noise_sigma"] = dataset.world.noise_sigma;
  std::ofstream out(dir / "dataset.json", std::ios::trunc);
  out << meta.dump(1) << '\n';

  std::ofstream vocab(dir / "vocab.txt", std::ios::trunc);
  for (const auto& t : Vocabulary::standard().tokens()) vocab << t << '\n';
}

Dataset read_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  try {
    const json meta = json::parse(read_file(dir / "dataset.json"));
    ds.style = parse_style(meta.at("style").get<std::string>());
    ds.seed = meta.at("seed").get<std::uint64_t>();
    ds.train_houses = meta.at("train_houses").get<std::vector<std::size_t>>();
    ds.unseen_houses = meta.at("unseen_houses").get<std::vector<std::size_t>>();
    ds.world.viewpoints = meta.at("viewpoints").get<std::size_t>();
    ds.world.vision_dim = meta.at("vision_dim").get<std::size_t>();
    ds.world.noise_sigma = meta.at("noise_sigma").get<double>();
    const std::size_t n = meta.at("houses").get<std::size_t>();
    for (std::size_t h = 0; h < n; ++h) {
      ds.houses.push_back(house_from_json(read_file(dir / "houses" / ("house_" + std::to_string(h) + ".json"))));
      if (ds.houses.back().id != h) throw DataError("house file id mismatch for house " + std::to_string(h));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed dataset.json in " + dir.string() + ": " + e.what());
  }
  ds.train = read_lines(dir / "train.jsonl");
  ds.val_seen = read_lines(dir / "val_seen.jsonl");
  ds.val_unseen = read_lines(dir / "val_unseen.jsonl");
  return ds;
}

}  // namespace lovis
