#pragma once

// Flat key=value text files ('#' starts a comment). Used for run configs and
// the human-readable model config dump.

#include <map>
#include <string>

namespace dymn {

class KvFile {
 public:
  KvFile() = default;
  static KvFile parse_file(const std::string& path);
  static KvFile parse_text(const std::string& text);

  bool has(const std::string& key) const;
  std::string get(const std::string& key, const std::string& fallback) const;
  double get(const std::string& key, double fallback) const;
  int get(const std::string& key, int fallback) const;
  bool get(const std::string& key, bool fallback) const;

  void set(const std::string& key, const std::string& value);
  std::string dump() const;

  const std::map<std::string, std::string>& items() const { return kv_; }

 private:
  std::map<std::string, std::string> kv_;
};

}  // namespace dymn
