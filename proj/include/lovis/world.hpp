#pragma once

// Synthetic discrete navigation world: houses are connectivity graphs of
// panoramic viewpoints whose 36-sector panoramas carry landmark-grounded
// feature vectors. Episodes pair a templated instruction with a path.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace lovis {

inline constexpr std::size_t kHeadingBuckets = 12;
inline constexpr std::size_t kElevationRows = 3;
inline constexpr std::size_t kSectors = kHeadingBuckets * kElevationRows;
inline constexpr std::size_t kOrientationDim = 128;
inline constexpr std::size_t kOrientationRepeats = 32;
inline constexpr double kSuccessDistance = 3.0;

inline constexpr double kPi = 3.14159265358979323846;
inline double deg2rad(double deg) { return deg * kPi / 180.0; }

// Wraps an angle into (−π, π].
double wrap_angle(double radians);

enum class DatasetStyle { kR2R, kR4R };
std::string to_string(DatasetStyle style);
DatasetStyle parse_style(const std::string& s);

struct WorldConfig {
  std::size_t viewpoints = 30;
  std::size_t vision_dim = 64;
  double noise_sigma = 0.1;
  double stairs_probability = 0.15;
  double extra_edge_probability = 0.2;
  std::uint64_t basis_seed = 0x10715ULL;
};

struct Viewpoint {
  std::size_t id = 0;
  double x = 0.0;
  double y = 0.0;
  std::vector<std::size_t> landmarks;
};

struct Edge {
  std::size_t a = 0;
  std::size_t b = 0;
  int elevation_deg = 0;  // as seen travelling a → b; b → a is the negation
};

struct Neighbor {
  std::size_t id;
  double length;
  int elevation_deg;
  double heading;  // absolute heading of the edge direction
};

class House {
 public:
  std::size_t id = 0;
  std::vector<Viewpoint> viewpoints;
  std::vector<Edge> edges;
  std::uint64_t basis_seed = 0;
  std::uint64_t noise_seed = 0;
  double noise_sigma = 0.1;
  std::size_t vision_dim = 64;

  // Builds adjacency, the landmark basis and all-pairs geodesic distances.
  // Must be called after viewpoints/edges are set.
  void finalize();

  std::size_t size() const { return viewpoints.size(); }
  const std::vector<Neighbor>& neighbors(std::size_t vp) const;
  std::optional<Neighbor> edge(std::size_t from, std::size_t to) const;
  double distance(std::size_t a, std::size_t b) const;
  const std::vector<double>& basis(std::size_t landmark) const;

 private:
  std::vector<std::vector<Neighbor>> adjacency_;
  std::vector<double> distances_;
  std::vector<std::vector<double>> basis_;
};

House generate_house(std::uint64_t seed, std::size_t n_viewpoints, const WorldConfig& config = {});

// Orthonormal landmark directions shared by every house built from `seed`.
std::vector<std::vector<double>> landmark_basis(std::uint64_t seed, std::size_t count, std::size_t dim);

struct RelativePose {
  double alpha;     // left-positive heading offset, (−π, π]
  double beta;      // elevation
  double distance;  // metres
};

RelativePose relative_pose(const House& house, std::size_t from, std::size_t to, double agent_heading);

std::vector<double> orientation_feature(double alpha, double beta);

// Sector index = elevation row (0: −30°, 1: 0°, 2: +30°) · 12 + heading bucket,
// with buckets centred on multiples of 30° of absolute heading.
std::size_t sector_index(double heading, int elevation_deg);
std::size_t heading_bucket(double heading);

// Landmarks visible in a sector: neighbours whose edge falls in it, plus the
// viewpoint's own landmarks in every downward-looking sector.
std::vector<std::size_t> sector_landmarks(const House& house, std::size_t vp, std::size_t sector);
std::vector<double> vision_feature(const House& house, std::size_t vp, std::size_t sector);

struct Panorama {
  std::array<std::vector<double>, kSectors> sectors;
};
Panorama panorama(const House& house, std::size_t vp);

struct Candidate {
  std::size_t viewpoint;
  double alpha;
  double beta;
  double heading;  // absolute heading the agent faces after taking it
  double distance;
  std::vector<double> vision;
  std::vector<double> orientation;
};

// Index 0 is STOP (current viewpoint, α = β = 0, vision = the downward sector
// the agent faces); the rest are neighbours in ascending id order.
struct CandidateSet {
  std::vector<Candidate> items;

  std::size_t size() const { return items.size(); }
  std::optional<std::size_t> index_of(std::size_t viewpoint) const;
};

CandidateSet build_candidates(const House& house, std::size_t vp, double heading);

// Minimum metric-length path; among equal-length continuations the smaller
// next viewpoint id wins.
std::vector<std::size_t> shortest_path(const House& house, std::size_t start, std::size_t goal);
double path_length(const House& house, const std::vector<std::size_t>& path);

// ---------------------------------------------------------------------------
// Language

extern const std::vector<std::string> kDirectionWords;
extern const std::vector<std::string> kLandmarkWords;

class Vocabulary {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kCls = 1;
  static constexpr std::size_t kSep = 2;
  static constexpr std::size_t kMask = 3;

  // Specials, template words, direction words, then landmark words.
  static Vocabulary standard();

  std::size_t size() const { return tokens_.size(); }
  std::size_t id(const std::string& token) const;
  const std::string& token(std::size_t id) const { return tokens_.at(id); }
  bool is_direction(std::size_t id) const;
  bool is_landmark(std::size_t id) const;
  std::size_t landmark_token(std::size_t landmark) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
  std::size_t first_direction_ = 0;
  std::size_t first_landmark_ = 0;
};

std::string direction_word(double alpha, double beta);

// "turn <dir> and walk to the <landmark> ." per hop, then "stop at the <landmark> .".
std::vector<std::string> generate_instruction(const House& house, const std::vector<std::size_t>& path,
                                              std::uint64_t seed, double initial_heading = 0.0);

struct HopDescriptor {
  std::string direction;
  std::string landmark;
};
struct ParsedInstruction {
  std::vector<HopDescriptor> hops;
  std::string stop_landmark;
};
ParsedInstruction parse_instruction(const std::vector<std::string>& tokens);

std::vector<std::string> split_tokens(const std::string& text);
std::string join_tokens(const std::vector<std::string>& tokens);

// ---------------------------------------------------------------------------
// Episodes and datasets

struct Episode {
  std::size_t house_id = 0;
  std::vector<std::string> instruction;
  std::vector<std::size_t> path;
  std::size_t goal = 0;
  double initial_heading = 0.0;
};

struct Dataset {
  DatasetStyle style = DatasetStyle::kR2R;
  std::uint64_t seed = 0;
  WorldConfig world;
  std::vector<House> houses;  // indexed by house id
  std::vector<std::size_t> train_houses;
  std::vector<std::size_t> unseen_houses;
  std::vector<Episode> train;
  std::vector<Episode> val_seen;
  std::vector<Episode> val_unseen;

  const House& house(std::size_t id) const;
  const std::vector<Episode>& split(const std::string& name) const;
};

struct PathLimits {
  std::size_t min_hops;
  std::size_t max_hops;
};
PathLimits r2r_hop_limits();

// Held-out (unseen) houses are the last max(1, round(n/5)). val_seen holds
// fresh start/goal pairs from training houses.
Dataset make_dataset(std::size_t n_houses, std::size_t episodes_per_house, std::uint64_t seed,
                     DatasetStyle style = DatasetStyle::kR2R, const WorldConfig& world = {});

void write_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

std::string house_to_json(const House& house);
House house_from_json(const std::string& text);
std::string episode_to_json(const Episode& episode);
Episode episode_from_json(const std::string& line);

}  // namespace lovis
