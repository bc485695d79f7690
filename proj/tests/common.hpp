#pragma once

#include <unistd.h>

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "fbdebias/dataset.hpp"
#include "fbdebias/rng.hpp"

namespace testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("fbd_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Random split dataset with `per_part` events in each partition and
// distinct items per user.
inline fbd::SplitDataset random_dataset(std::size_t n_users, std::size_t n_items, std::array<std::size_t, 4> per_part,
                                        std::uint64_t seed) {
  fbd::Rng rng(seed);
  fbd::SplitDataset ds;
  ds.n_users = n_users;
  ds.n_items = n_items;
  ds.scale = {0.0, 5.0};
  std::uniform_real_distribution<double> rating(0.0, 5.0);
  for (std::size_t u = 0; u < n_users; ++u) {
    std::vector<std::uint32_t> items(n_items);
    for (std::uint32_t j = 0; j < n_items; ++j) items[j] = j;
    std::shuffle(items.begin(), items.end(), rng);
    fbd::UserSplit s;
    std::size_t pos = 0;
    for (std::size_t p = 0; p < 4; ++p)
      for (std::size_t k = 0; k < per_part[p]; ++k, ++pos)
        s.parts[p].push_back({items[pos], rating(rng), static_cast<std::int64_t>(pos)});
    ds.users.push_back(std::move(s));
  }
  return ds;
}

}  // namespace testing
