#pragma once

// Output directory bookkeeping: git-style blob hashes, file writers, manifests.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>
#include <openssl/sha.h>

namespace convint::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

/// SHA-1 of "blob <size>\0<content>", as printed by `git hash-object`.
inline std::string git_blob_sha1(const std::string& content) {
  const std::string head = "blob " + std::to_string(content.size()) + '\0';
  SHA_CTX ctx;
  SHA1_Init(&ctx);
  SHA1_Update(&ctx, head.data(), head.size());
  SHA1_Update(&ctx, content.data(), content.size());
  unsigned char md[SHA_DIGEST_LENGTH];
  SHA1_Final(md, &ctx);
  char hex[2 * SHA_DIGEST_LENGTH + 1];
  for (int i = 0; i < SHA_DIGEST_LENGTH; ++i) std::snprintf(hex + 2 * i, 3, "%02x", md[i]);
  return hex;
}

inline std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + p.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

/// Collects outputs written below `root` and inputs read from anywhere.
class OutputDir {
 public:
  explicit OutputDir(fs::path root) : root_(std::move(root)) { fs::create_directories(root_); }

  const fs::path& root() const { return root_; }

  /// Writes `content` to root/rel and records its hash.
  void write(const std::string& rel, const std::string& content) {
    const fs::path p = root_ / rel;
    fs::create_directories(p.parent_path());
    std::ofstream os(p, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + p.string());
    os << content;
    outputs_[rel] = git_blob_sha1(content);
  }
  void write_json(const std::string& rel, const json& j) { write(rel, j.dump(2) + "\n"); }

  void input(const std::string& label, const fs::path& p) { inputs_[label] = git_blob_sha1(read_file(p)); }
  void input_hash(const std::string& label, const std::string& sha) { inputs_[label] = sha; }

  /// manifest_<command>.json with the resolved config and every hash.
  void finish(const std::string& command, const json& config) {
    json m;
    m["command"] = command;
    m["config"] = config;
    m["inputs"] = json::object();
    for (const auto& [k, v] : inputs_) m["inputs"][k] = v;
    m["outputs"] = json::object();
    for (const auto& [k, v] : outputs_) m["outputs"][k] = v;
    const std::string text = m.dump(2) + "\n";
    std::ofstream os(root_ / ("manifest_" + command + ".json"), std::ios::binary);
    os << text;
  }

 private:
  fs::path root_;
  std::map<std::string, std::string> inputs_, outputs_;
};

}  // namespace convint::cli
