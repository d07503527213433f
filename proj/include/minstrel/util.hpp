#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace minstrel {

using json = nlohmann::ordered_json;

// FNV-1a 64-bit over arbitrary bytes. Used for artifact manifests and config
// fingerprints; not cryptographic.
uint64_t fnv1a(std::string_view bytes, uint64_t h = 14695981039346656037ull);

std::string hash_hex(uint64_t h);

// Hash of a file's contents. Throws MissingArtifactError if absent.
std::string hash_file(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view contents);

// JSONL: one compact json object per line.
void write_jsonl(const std::filesystem::path& path, const std::vector<json>& records);
std::vector<json> read_jsonl(const std::filesystem::path& path);

// Spearman rank correlation; ties get average ranks.
double spearman(const std::vector<double>& a, const std::vector<double>& b);

// ROC AUC for binary labels (1 = positive). Ties in score handled by the
// rank-sum formulation.
double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);

}  // namespace minstrel
