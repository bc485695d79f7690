#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace fbd {

struct RatedEvent {
  std::uint32_t item = 0;
  double rating = 0.0;
  std::int64_t timestamp = 0;

  friend bool operator==(const RatedEvent&, const RatedEvent&) = default;
};

/// Role of an event in the experiment protocol. Values double as indices
/// into UserSplit::parts and follow the original sequence order.
enum class Partition : int { UnbiasedTest = 0, Train = 1, Validation = 2, ExposureTest = 3 };

inline constexpr std::array<Partition, 4> kAllPartitions = {Partition::UnbiasedTest, Partition::Train,
                                                            Partition::Validation, Partition::ExposureTest};

std::string_view partition_name(Partition p);
Partition parse_partition(std::string_view name);

struct UserSplit {
  std::array<std::vector<RatedEvent>, 4> parts;

  std::vector<RatedEvent>& operator[](Partition p) { return parts[static_cast<std::size_t>(p)]; }
  const std::vector<RatedEvent>& operator[](Partition p) const { return parts[static_cast<std::size_t>(p)]; }

  /// unbiased_test | train | validation | exposure_test
  std::vector<RatedEvent> concatenated() const;
  /// train | validation | exposure_test: the feedback-loop sequence.
  std::vector<RatedEvent> biased_sequence() const;
  std::size_t total() const;

  friend bool operator==(const UserSplit&, const UserSplit&) = default;
};

struct RatingScale {
  double min = 0.0;
  double max = 1.0;

  bool contains(double r) const { return r >= min && r <= max; }
  double clamp(double r) const { return r < min ? min : (r > max ? max : r); }
  friend bool operator==(const RatingScale&, const RatingScale&) = default;
};

struct SplitDataset {
  std::size_t n_users = 0;
  std::size_t n_items = 0;
  RatingScale scale;
  std::vector<UserSplit> users;
  /// External identifiers of the dense indices; empty for synthetic data.
  std::vector<std::string> user_ids;
  std::vector<std::string> item_ids;
  /// Optional per-item characteristic vectors (genre flags, latent factors).
  std::vector<std::vector<double>> item_features;

  std::size_t count(Partition p) const;
  /// Throws Error(InvalidArgument) on any violated structural invariant.
  void validate() const;

  friend bool operator==(const SplitDataset&, const SplitDataset&) = default;
};

struct PeriodSpec {
  std::int64_t start = 0;  ///< inclusive, unix seconds
  std::int64_t end = 0;    ///< inclusive, unix seconds
  /// true: users whose first rating falls in the period, with their whole
  /// history; false: only events inside the period are considered.
  bool registration_based = true;

  /// Dates as YYYY-MM-DD (UTC), end date inclusive.
  static PeriodSpec from_dates(std::string_view start_date, std::string_view end_date, bool registration_based = true);
  bool contains(std::int64_t t) const { return t >= start && t <= end; }
};

struct RawInteraction {
  std::string user;
  std::string item;
  double rating = 0.0;
  std::int64_t timestamp = 0;
};

using RawTable = std::vector<RawInteraction>;

enum class RawFormat { MovielensCsv, GoodreadsJsonLines, Canonical };

RawFormat parse_raw_format(std::string_view tag);
RawTable load_interactions(const std::filesystem::path& path, RawFormat format);

/// Leading positions per partition, in sequence order.
struct SplitRule {
  std::size_t unbiased_test = 0;
  std::size_t train = 0;
  std::size_t validation = 0;
  std::size_t exposure_test = 0;

  std::size_t total() const { return unbiased_test + train + validation + exposure_test; }
  /// Partition of 0-based position `pos` (< total()).
  Partition partition_of(std::size_t pos) const;
};

struct MovielensOptions {
  SplitRule rule{15, 30, 10, 10};
  std::size_t min_events = 65;
  /// Items are kept only if their count is strictly greater.
  std::size_t min_item_popularity = 100;
  RatingScale scale{0.5, 5.0};
};

struct GoodreadsOptions {
  SplitRule rule{20, 30, 10, 10};
  std::size_t top_items = 3000;
  RatingScale scale{1.0, 5.0};
};

SplitDataset build_movielens_split(const RawTable& raw, const PeriodSpec& period, const MovielensOptions& opts = {});
SplitDataset build_goodreads_split(const RawTable& raw, const PeriodSpec& period, std::size_t sample_users,
                                   std::uint64_t seed, const GoodreadsOptions& opts = {});

/// Attach characteristic vectors from a Movielens movies.csv (genre flags).
void attach_movielens_genres(SplitDataset& ds, const std::filesystem::path& movies_csv);

struct PositionMean {
  std::size_t position = 0;  ///< 1-based
  std::optional<double> mean;
  std::size_t count = 0;
};

/// Mean rating at each 1-based order position in [first, last] over the
/// concatenated per-user sequence.
std::vector<PositionMean> rating_by_position(const SplitDataset& ds, std::size_t first, std::size_t last);

/// Canonical text format plus `<path>.items` / `<path>.users` sidecars when
/// identifiers or features are present.
void save_dataset(const SplitDataset& ds, const std::filesystem::path& path);
SplitDataset load_dataset(const std::filesystem::path& path);

/// Shortest round-trip decimal text for a double.
std::string format_double(double v);
double parse_double(std::string_view text, std::string_view context);

}  // namespace fbd
