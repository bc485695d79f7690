#include "fbdebias/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "fbdebias/error.hpp"
#include "fbdebias/rng.hpp"
#include "json.hpp"

namespace fbd {

namespace {

constexpr std::string_view kMagic = "FDB1";
constexpr std::string_view kItemsMagic = "FDB1-ITEMS";
constexpr std::string_view kUsersMagic = "FDB1-USERS";

std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) s.remove_suffix(1);
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  return s;
}

template <class Int>
Int parse_int(std::string_view text, std::string_view context) {
  Int v{};
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size())
    fail(ErrorCode::Parse, std::string(context) + ": invalid integer '" + std::string(text) + "'");
  return v;
}

std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::Io, "cannot open '" + path.string() + "'");
  return in;
}

std::string line_context(const std::filesystem::path& path, std::size_t line) {
  return path.filename().string() + ":" + std::to_string(line);
}

struct UserEvents {
  std::string id;
  std::vector<RawInteraction> events;
};

// Groups rows by user in order of first appearance; per-user events are
// stable-sorted by timestamp and deduplicated by item (first kept).
std::vector<UserEvents> group_by_user(const RawTable& raw) {
  std::vector<UserEvents> users;
  std::unordered_map<std::string, std::size_t> index;
  for (const auto& row : raw) {
    auto [it, inserted] = index.try_emplace(row.user, users.size());
    if (inserted) users.push_back({row.user, {}});
    users[it->second].events.push_back(row);
  }
  for (auto& u : users) {
    std::stable_sort(u.events.begin(), u.events.end(),
                     [](const RawInteraction& a, const RawInteraction& b) { return a.timestamp < b.timestamp; });
    std::unordered_set<std::string> seen;
    std::erase_if(u.events, [&](const RawInteraction& e) { return !seen.insert(e.item).second; });
  }
  return users;
}

std::vector<UserEvents> select_period_users(std::vector<UserEvents> users, const PeriodSpec& period,
                                            std::size_t min_events) {
  std::vector<UserEvents> kept;
  for (auto& u : users) {
    if (!period.registration_based) std::erase_if(u.events, [&](const auto& e) { return !period.contains(e.timestamp); });
    if (u.events.empty() || !period.contains(u.events.front().timestamp)) continue;
    if (u.events.size() < min_events) continue;
    u.events.resize(min_events);
    kept.push_back(std::move(u));
  }
  return kept;
}

// Dense re-indexing in order of first appearance; events of items for which
// keep(item) is false are dropped from their original partition slot.
SplitDataset assemble(const std::vector<UserEvents>& users, const SplitRule& rule, RatingScale scale,
                      const std::function<bool(const std::string&)>& keep) {
  SplitDataset ds;
  ds.scale = scale;
  std::unordered_map<std::string, std::uint32_t> item_index;
  for (const auto& u : users) {
    UserSplit split;
    for (std::size_t pos = 0; pos < u.events.size() && pos < rule.total(); ++pos) {
      const auto& e = u.events[pos];
      if (!keep(e.item)) continue;
      if (!scale.contains(e.rating))
        fail(ErrorCode::InvalidArgument, "rating " + format_double(e.rating) + " of user " + u.id + " outside scale");
      auto [it, inserted] = item_index.try_emplace(e.item, static_cast<std::uint32_t>(ds.item_ids.size()));
      if (inserted) ds.item_ids.push_back(e.item);
      split[rule.partition_of(pos)].push_back({it->second, e.rating, e.timestamp});
    }
    ds.users.push_back(std::move(split));
    ds.user_ids.push_back(u.id);
  }
  ds.n_users = ds.users.size();
  ds.n_items = ds.item_ids.size();
  return ds;
}

// Sidecar ids are free text: escape the field and line separators.
std::string escape_id(std::string_view id) {
  std::string out;
  for (char c : id) {
    switch (c) {
      case '\\': out += "\\\\"; break;
      case '\t': out += "\\t"; break;
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      default: out += c;
    }
  }
  return out;
}

std::string unescape_id(std::string_view text, const std::string& ctx) {
  std::string out;
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (text[i] != '\\') {
      out += text[i];
      continue;
    }
    if (++i == text.size()) fail(ErrorCode::Parse, ctx + ": dangling escape in id");
    switch (text[i]) {
      case '\\': out += '\\'; break;
      case 't': out += '\t'; break;
      case 'n': out += '\n'; break;
      case 'r': out += '\r'; break;
      default: fail(ErrorCode::Parse, ctx + ": unknown escape in id");
    }
  }
  return out;
}

}  // namespace

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc()) fail(ErrorCode::Internal, "format_double failed");
  return std::string(buf, ptr);
}

double parse_double(std::string_view text, std::string_view context) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (text.empty() || ec != std::errc() || ptr != text.data() + text.size())
    fail(ErrorCode::Parse, std::string(context) + ": invalid number '" + std::string(text) + "'");
  return v;
}

std::string_view partition_name(Partition p) {
  switch (p) {
    case Partition::UnbiasedTest: return "unbiased_test";
    case Partition::Train: return "train";
    case Partition::Validation: return "validation";
    case Partition::ExposureTest: return "exposure_test";
  }
  return "?";
}

Partition parse_partition(std::string_view name) {
  for (Partition p : kAllPartitions)
    if (partition_name(p) == name) return p;
  fail(ErrorCode::Parse, "unknown partition '" + std::string(name) + "'");
}

std::vector<RatedEvent> UserSplit::concatenated() const {
  std::vector<RatedEvent> out;
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

std::vector<RatedEvent> UserSplit::biased_sequence() const {
  std::vector<RatedEvent> out;
  for (Partition p : {Partition::Train, Partition::Validation, Partition::ExposureTest})
    out.insert(out.end(), (*this)[p].begin(), (*this)[p].end());
  return out;
}

std::size_t UserSplit::total() const {
  std::size_t n = 0;
  for (const auto& p : parts) n += p.size();
  return n;
}

std::size_t SplitDataset::count(Partition p) const {
  std::size_t n = 0;
  for (const auto& u : users) n += u[p].size();
  return n;
}

void SplitDataset::validate() const {
  if (users.size() != n_users) fail(ErrorCode::InvalidArgument, "user count does not match n_users");
  if (!(scale.min < scale.max)) fail(ErrorCode::InvalidArgument, "rating scale min must be below max");
  if (!item_ids.empty() && item_ids.size() != n_items) fail(ErrorCode::InvalidArgument, "item id map size mismatch");
  if (!user_ids.empty() && user_ids.size() != n_users) fail(ErrorCode::InvalidArgument, "user id map size mismatch");
  if (!item_features.empty() && item_features.size() != n_items)
    fail(ErrorCode::InvalidArgument, "item feature table size mismatch");
  std::vector<std::uint32_t> seen(n_items, UINT32_MAX);
  for (std::size_t u = 0; u < users.size(); ++u) {
    for (Partition p : kAllPartitions) {
      for (const auto& e : users[u][p]) {
        if (e.item >= n_items)
          fail(ErrorCode::InvalidArgument, "user " + std::to_string(u) + ": item " + std::to_string(e.item) + " out of range");
        if (!scale.contains(e.rating))
          fail(ErrorCode::InvalidArgument, "user " + std::to_string(u) + ": rating outside scale");
        if (seen[e.item] == u)
          fail(ErrorCode::InvalidArgument, "user " + std::to_string(u) + ": item " + std::to_string(e.item) + " repeated");
        seen[e.item] = static_cast<std::uint32_t>(u);
      }
    }
  }
}

PeriodSpec PeriodSpec::from_dates(std::string_view start_date, std::string_view end_date, bool registration_based) {
  auto to_days = [](std::string_view d) {
    const auto parts = split(d, '-');
    if (parts.size() != 3) fail(ErrorCode::Parse, "date '" + std::string(d) + "' is not YYYY-MM-DD");
    using namespace std::chrono;
    const year_month_day ymd{year{parse_int<int>(parts[0], "year")}, month{parse_int<unsigned>(parts[1], "month")},
                             day{parse_int<unsigned>(parts[2], "day")}};
    if (!ymd.ok()) fail(ErrorCode::Parse, "invalid calendar date '" + std::string(d) + "'");
    return static_cast<std::int64_t>(sys_days{ymd}.time_since_epoch().count());
  };
  PeriodSpec p;
  p.start = to_days(start_date) * 86400;
  p.end = (to_days(end_date) + 1) * 86400 - 1;
  p.registration_based = registration_based;
  if (!(p.start < p.end)) fail(ErrorCode::InvalidArgument, "period start must precede end");
  return p;
}

RawFormat parse_raw_format(std::string_view tag) {
  if (tag == "movielens_csv" || tag == "movielens") return RawFormat::MovielensCsv;
  if (tag == "goodreads_json_lines" || tag == "goodreads") return RawFormat::GoodreadsJsonLines;
  if (tag == "canonical") return RawFormat::Canonical;
  fail(ErrorCode::InvalidArgument, "unknown interaction format '" + std::string(tag) + "'");
}

namespace {

RawTable load_movielens(const std::filesystem::path& path) {
  std::ifstream in = open_input(path);
  RawTable rows;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    const std::string_view l = trim(line);
    if (l.empty()) continue;
    if (n == 1 && l.starts_with("userId")) continue;
    const auto f = split(l, ',');
    const std::string ctx = line_context(path, n);
    if (f.size() != 4) fail(ErrorCode::Parse, ctx + ": expected 4 comma-separated fields");
    rows.push_back({std::string(f[0]), std::string(f[1]), parse_double(f[2], ctx), parse_int<std::int64_t>(f[3], ctx)});
  }
  return rows;
}

std::string json_text(const nlohmann::json& v) {
  if (v.is_string()) return v.get<std::string>();
  return v.dump();
}

double json_number(const nlohmann::json& v, const std::string& ctx) {
  if (v.is_number()) return v.get<double>();
  if (v.is_string()) return parse_double(v.get<std::string>(), ctx);
  fail(ErrorCode::Parse, ctx + ": expected a number");
}

RawTable load_goodreads(const std::filesystem::path& path) {
  std::ifstream in = open_input(path);
  RawTable rows;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (trim(line).empty()) continue;
    const std::string ctx = line_context(path, n);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::Parse, ctx + ": " + e.what());
    }
    for (const char* key : {"user_id", "book_id", "rating", "timestamp"})
      if (!j.contains(key)) fail(ErrorCode::Parse, ctx + ": missing field '" + key + "'");
    rows.push_back({json_text(j["user_id"]), json_text(j["book_id"]), json_number(j["rating"], ctx),
                    static_cast<std::int64_t>(json_number(j["timestamp"], ctx))});
  }
  return rows;
}

RawTable load_canonical_raw(const std::filesystem::path& path) {
  const SplitDataset ds = load_dataset(path);
  RawTable rows;
  for (std::size_t u = 0; u < ds.users.size(); ++u)
    for (const auto& e : ds.users[u].concatenated())
      rows.push_back({std::to_string(u), std::to_string(e.item), e.rating, e.timestamp});
  return rows;
}

}  // namespace

RawTable load_interactions(const std::filesystem::path& path, RawFormat format) {
  switch (format) {
    case RawFormat::MovielensCsv: return load_movielens(path);
    case RawFormat::GoodreadsJsonLines: return load_goodreads(path);
    case RawFormat::Canonical: return load_canonical_raw(path);
  }
  fail(ErrorCode::InvalidArgument, "unknown interaction format");
}

Partition SplitRule::partition_of(std::size_t pos) const {
  if (pos < unbiased_test) return Partition::UnbiasedTest;
  pos -= unbiased_test;
  if (pos < train) return Partition::Train;
  pos -= train;
  if (pos < validation) return Partition::Validation;
  return Partition::ExposureTest;
}

SplitDataset build_movielens_split(const RawTable& raw, const PeriodSpec& period, const MovielensOptions& opts) {
  if (opts.rule.total() > opts.min_events)
    fail(ErrorCode::InvalidArgument, "split rule needs more events than min_events");
  const auto users = select_period_users(group_by_user(raw), period, opts.min_events);
  std::unordered_map<std::string, std::size_t> popularity;
  for (const auto& u : users)
    for (const auto& e : u.events) ++popularity[e.item];
  SplitDataset ds = assemble(users, opts.rule, opts.scale,
                             [&](const std::string& item) { return popularity[item] > opts.min_item_popularity; });
  if (ds.n_users == 0 || ds.n_items == 0) fail(ErrorCode::EmptyDataset, "no users or items left after filtering");
  return ds;
}

SplitDataset build_goodreads_split(const RawTable& raw, const PeriodSpec& period, std::size_t sample_users,
                                   std::uint64_t seed, const GoodreadsOptions& opts) {
  if (sample_users == 0) fail(ErrorCode::EmptyDataset, "sample_users is 0: empty dataset requested");
  // Rating 0 marks a shelved but unrated book.
  RawTable rated;
  for (const auto& r : raw)
    if (r.rating >= opts.scale.min) rated.push_back(r);
  auto grouped = group_by_user(rated);

  std::unordered_map<std::string, std::size_t> popularity;
  for (const auto& u : grouped)
    for (const auto& e : u.events) ++popularity[e.item];
  std::vector<std::pair<std::string, std::size_t>> ranked(popularity.begin(), popularity.end());
  std::sort(ranked.begin(), ranked.end(),
            [](const auto& a, const auto& b) { return a.second != b.second ? a.second > b.second : a.first < b.first; });
  if (ranked.size() > opts.top_items) ranked.resize(opts.top_items);
  std::unordered_set<std::string> top;
  for (const auto& [item, count] : ranked) top.insert(item);
  for (auto& u : grouped) std::erase_if(u.events, [&](const auto& e) { return !top.contains(e.item); });

  auto eligible = select_period_users(std::move(grouped), period, opts.rule.total());
  if (eligible.size() < sample_users) {
    fail(ErrorCode::EmptyDataset, "only " + std::to_string(eligible.size()) + " eligible users, " +
                                      std::to_string(sample_users) + " requested");
  }
  Rng rng(seed);
  std::vector<std::size_t> order(eligible.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<std::size_t> chosen;
  std::sample(order.begin(), order.end(), std::back_inserter(chosen), sample_users, rng);
  std::vector<UserEvents> sampled;
  for (std::size_t i : chosen) sampled.push_back(std::move(eligible[i]));
  return assemble(sampled, opts.rule, opts.scale, [](const std::string&) { return true; });
}

void attach_movielens_genres(SplitDataset& ds, const std::filesystem::path& movies_csv) {
  if (ds.item_ids.size() != ds.n_items) fail(ErrorCode::InvalidArgument, "dataset lacks an item id map");
  std::ifstream in = open_input(movies_csv);
  std::unordered_map<std::string, std::vector<std::string>> genres_of;
  std::vector<std::string> vocabulary;
  std::unordered_map<std::string, std::size_t> vocab_index;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    const std::string_view l = trim(line);
    if (l.empty() || (n == 1 && l.starts_with("movieId"))) continue;
    // movieId,title,genres where the title may be quoted and contain commas
    const std::size_t first = l.find(',');
    const std::size_t last = l.rfind(',');
    if (first == std::string_view::npos || first == last)
      fail(ErrorCode::Parse, line_context(movies_csv, n) + ": expected movieId,title,genres");
    auto& g = genres_of[std::string(l.substr(0, first))];
    for (auto name : split(l.substr(last + 1), '|')) {
      auto [it, inserted] = vocab_index.try_emplace(std::string(name), vocabulary.size());
      if (inserted) vocabulary.emplace_back(name);
      g.emplace_back(name);
    }
  }
  ds.item_features.assign(ds.n_items, std::vector<double>(vocabulary.size(), 0.0));
  for (std::size_t j = 0; j < ds.n_items; ++j) {
    auto it = genres_of.find(ds.item_ids[j]);
    if (it == genres_of.end()) continue;
    for (const auto& g : it->second) ds.item_features[j][vocab_index[g]] = 1.0;
  }
}

std::vector<PositionMean> rating_by_position(const SplitDataset& ds, std::size_t first, std::size_t last) {
  if (first == 0 || last < first) fail(ErrorCode::InvalidArgument, "positions are 1-based and non-empty");
  std::vector<PositionMean> out;
  std::vector<double> sums(last - first + 1, 0.0);
  std::vector<std::size_t> counts(sums.size(), 0);
  for (const auto& u : ds.users) {
    const auto seq = u.concatenated();
    for (std::size_t k = first; k <= last && k <= seq.size(); ++k) {
      sums[k - first] += seq[k - 1].rating;
      ++counts[k - first];
    }
  }
  for (std::size_t i = 0; i < sums.size(); ++i) {
    PositionMean pm;
    pm.position = first + i;
    pm.count = counts[i];
    if (counts[i] > 0) pm.mean = sums[i] / static_cast<double>(counts[i]);
    out.push_back(pm);
  }
  return out;
}

void save_dataset(const SplitDataset& ds, const std::filesystem::path& path) {
  ds.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::Io, "cannot write '" + path.string() + "'");
  out << kMagic << ' ' << ds.n_users << ' ' << ds.n_items << ' ' << format_double(ds.scale.min) << ' '
      << format_double(ds.scale.max) << '\n';
  for (std::size_t u = 0; u < ds.users.size(); ++u) {
    for (Partition p : kAllPartitions) {
      for (const auto& e : ds.users[u][p]) {
        out << u << '\t' << e.item << '\t' << format_double(e.rating) << '\t' << e.timestamp << '\t'
            << partition_name(p) << '\n';
      }
    }
  }
  if (!out) fail(ErrorCode::Io, "write failed for '" + path.string() + "'");

  const auto items_path = std::filesystem::path(path.string() + ".items");
  const auto users_path = std::filesystem::path(path.string() + ".users");
  std::filesystem::remove(items_path);
  std::filesystem::remove(users_path);
  if (!ds.item_ids.empty() || !ds.item_features.empty()) {
    std::ofstream items(items_path, std::ios::binary);
    if (!items) fail(ErrorCode::Io, "cannot write '" + items_path.string() + "'");
    items << kItemsMagic << ' ' << ds.n_items << ' ' << (ds.item_ids.empty() ? 0 : 1) << ' '
          << (ds.item_features.empty() ? 0 : 1) << '\n';
    for (std::size_t j = 0; j < ds.n_items; ++j) {
      items << j << '\t' << (ds.item_ids.empty() ? "" : escape_id(ds.item_ids[j])) << '\t';
      if (!ds.item_features.empty()) {
        for (std::size_t f = 0; f < ds.item_features[j].size(); ++f)
          items << (f ? "," : "") << format_double(ds.item_features[j][f]);
      }
      items << '\n';
    }
  }
  if (!ds.user_ids.empty()) {
    std::ofstream users(users_path, std::ios::binary);
    if (!users) fail(ErrorCode::Io, "cannot write '" + users_path.string() + "'");
    users << kUsersMagic << ' ' << ds.n_users << '\n';
    for (std::size_t u = 0; u < ds.n_users; ++u) users << u << '\t' << escape_id(ds.user_ids[u]) << '\n';
  }
}

SplitDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::Io, "cannot open '" + path.string() + "'");
  std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (!content.empty() && content.back() != '\n')
    fail(ErrorCode::Parse, path.string() + ": truncated file (missing final newline)");
  std::istringstream lines(content);
  std::string line;
  if (!std::getline(lines, line)) fail(ErrorCode::Parse, path.string() + ": empty file");
  const auto header = split(line, ' ');
  if (header.empty() || header[0] != kMagic)
    fail(ErrorCode::Version, path.string() + ": unsupported format header '" + line + "'");
  if (header.size() != 5) fail(ErrorCode::Parse, path.string() + ":1: malformed header");
  SplitDataset ds;
  ds.n_users = parse_int<std::size_t>(header[1], "header n_users");
  ds.n_items = parse_int<std::size_t>(header[2], "header n_items");
  ds.scale = {parse_double(header[3], "header rating_min"), parse_double(header[4], "header rating_max")};
  ds.users.resize(ds.n_users);
  std::size_t n = 1;
  while (std::getline(lines, line)) {
    ++n;
    const std::string ctx = line_context(path, n);
    const auto f = split(line, '\t');
    if (f.size() != 5) fail(ErrorCode::Parse, ctx + ": expected 5 tab-separated fields");
    const auto u = parse_int<std::size_t>(f[0], ctx);
    if (u >= ds.n_users) fail(ErrorCode::Parse, ctx + ": user index out of range");
    RatedEvent e{parse_int<std::uint32_t>(f[1], ctx), parse_double(f[2], ctx), parse_int<std::int64_t>(f[3], ctx)};
    ds.users[u][parse_partition(f[4])].push_back(e);
  }

  const auto items_path = std::filesystem::path(path.string() + ".items");
  if (std::filesystem::exists(items_path)) {
    std::ifstream items(items_path, std::ios::binary);
    std::getline(items, line);
    const auto h = split(line, ' ');
    if (h.size() != 4 || h[0] != kItemsMagic) fail(ErrorCode::Version, items_path.string() + ": bad header");
    if (parse_int<std::size_t>(h[1], "items header") != ds.n_items)
      fail(ErrorCode::Parse, items_path.string() + ": item count mismatch");
    const bool has_ids = h[2] == "1", has_features = h[3] == "1";
    std::size_t k = 1;
    while (std::getline(items, line)) {
      ++k;
      const std::string ctx = line_context(items_path, k);
      const auto f = split(line, '\t');
      if (f.size() != 3) fail(ErrorCode::Parse, ctx + ": expected 3 tab-separated fields");
      if (has_ids) ds.item_ids.push_back(unescape_id(f[1], ctx));
      if (has_features) {
        std::vector<double> feats;
        if (!f[2].empty())
          for (auto x : split(f[2], ',')) feats.push_back(parse_double(x, ctx));
        ds.item_features.push_back(std::move(feats));
      }
    }
  }
  const auto users_path = std::filesystem::path(path.string() + ".users");
  if (std::filesystem::exists(users_path)) {
    std::ifstream users(users_path, std::ios::binary);
    std::getline(users, line);
    const auto h = split(line, ' ');
    if (h.size() != 2 || h[0] != kUsersMagic) fail(ErrorCode::Version, users_path.string() + ": bad header");
    std::size_t k = 1;
    while (std::getline(users, line)) {
      ++k;
      const auto f = split(line, '\t');
      const std::string ctx = line_context(users_path, k);
      if (f.size() != 2) fail(ErrorCode::Parse, ctx + ": expected 2 fields");
      ds.user_ids.push_back(unescape_id(f[1], ctx));
    }
  }
  ds.validate();
  return ds;
}

}  // namespace fbd
