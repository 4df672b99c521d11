#pragma once

#include <map>
#include <optional>
#include <string>

#include "seqfm/common.hpp"

namespace seqfm {

// Flat key=value text: one pair per line, '#' comments, blank lines ignored.
// Later keys override earlier ones. This is the config grammar used by
// artifact headers and by --config files.
std::map<std::string, std::string> parse_kv_text(const std::string& text);

// Reads a key=value file, recursively splicing `include=path` lines (paths
// relative to the including file). Returns the expanded text.
std::string load_kv_file_with_includes(const std::string& path);

std::string kv_get(const std::map<std::string, std::string>& kv, const std::string& key);
std::optional<std::string> kv_find(const std::map<std::string, std::string>& kv,
                                   const std::string& key);
i64 kv_get_int(const std::map<std::string, std::string>& kv, const std::string& key);
double kv_get_double(const std::map<std::string, std::string>& kv, const std::string& key);
u64 kv_get_u64(const std::map<std::string, std::string>& kv, const std::string& key);

} // namespace seqfm
