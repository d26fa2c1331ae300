// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "mbrforge/error.hpp"

namespace mbrforge {

/// Stages one or more output files in temporaries next to their targets and
/// publishes them with rename() on commit(). Uncommitted temporaries are
/// removed on destruction, so a failed run never leaves a truncated output.
class AtomicWriteSet {
 public:
  AtomicWriteSet() = default;
  AtomicWriteSet(const AtomicWriteSet&) = delete;
  AtomicWriteSet& operator=(const AtomicWriteSet&) = delete;

  ~AtomicWriteSet() {
    for (const auto& f : files_) {
      std::error_code ec;
      std::filesystem::remove(f.temp, ec);
    }
  }

  void add(const std::filesystem::path& target, std::string_view contents) {
    auto temp = target;
    temp += ".tmp." + std::to_string(::getpid()) + "." + std::to_string(files_.size());
    {
      std::ofstream out(temp, std::ios::binary | std::ios::trunc);
      if (!out) throw IoError("cannot open '" + temp.string() + "' for writing");
      files_.push_back({target, temp});
      out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
      out.flush();
      if (!out) throw IoError("error while writing '" + temp.string() + "'");
    }
  }

  void commit() {
    for (auto& f : files_) {
      std::error_code ec;
      std::filesystem::rename(f.temp, f.target, ec);
      if (ec) {
        throw IoError("cannot rename '" + f.temp.string() + "' to '" + f.target.string() +
                      "': " + ec.message());
      }
    }
    files_.clear();
  }

 private:
  struct Staged {
    std::filesystem::path target;
    std::filesystem::path temp;
  };
  std::vector<Staged> files_;
};

inline void write_file_atomic(const std::filesystem::path& target, std::string_view contents) {
  AtomicWriteSet set;
  set.add(target, contents);
  set.commit();
}

}  // namespace mbrforge
