#include "seqfm/kv.hpp"

#include <fstream>
#include <sstream>

namespace seqfm {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

std::string dir_of(const std::string& path) {
    size_t slash = path.find_last_of('/');
    if (slash == std::string::npos) return ".";
    if (slash == 0) return "/";
    return path.substr(0, slash);
}

std::string expand_file(const std::string& path, int depth) {
    SEQFM_CHECK(depth < 16, "config include depth exceeds 16 (include cycle?) at " << path);
    std::ifstream f(path);
    SEQFM_CHECK(f.good(), "cannot open config file " << path);
    std::ostringstream out;
    std::string line;
    while (std::getline(f, line)) {
        std::string t = trim(line);
        if (t.rfind("include=", 0) == 0) {
            std::string inc = trim(t.substr(8));
            SEQFM_CHECK(!inc.empty(), "empty include path in " << path);
            if (inc[0] != '/') inc = dir_of(path) + "/" + inc;
            out << expand_file(inc, depth + 1);
        } else {
            out << line << "\n";
        }
    }
    return out.str();
}

} // namespace

std::map<std::string, std::string> parse_kv_text(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        lineno++;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        size_t eq = t.find('=');
        SEQFM_CHECK(eq != std::string::npos && eq > 0,
                    "config line " << lineno << " is not key=value: '" << t << "'");
        kv[trim(t.substr(0, eq))] = trim(t.substr(eq + 1));
    }
    return kv;
}

std::string load_kv_file_with_includes(const std::string& path) {
    return expand_file(path, 0);
}

std::string kv_get(const std::map<std::string, std::string>& kv, const std::string& key) {
    auto it = kv.find(key);
    SEQFM_CHECK(it != kv.end(), "config key missing: " << key);
    return it->second;
}

std::optional<std::string> kv_find(const std::map<std::string, std::string>& kv,
                                   const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) return std::nullopt;
    return it->second;
}

i64 kv_get_int(const std::map<std::string, std::string>& kv, const std::string& key) {
    const std::string s = kv_get(kv, key);
    try {
        return std::stoll(s);
    } catch (const std::exception&) {
        SEQFM_CHECK(false, "config key " << key << " is not an integer: '" << s << "'");
    }
    return 0;
}

double kv_get_double(const std::map<std::string, std::string>& kv, const std::string& key) {
    const std::string s = kv_get(kv, key);
    try {
        return std::stod(s);
    } catch (const std::exception&) {
        SEQFM_CHECK(false, "config key " << key << " is not a number: '" << s << "'");
    }
    return 0;
}

u64 kv_get_u64(const std::map<std::string, std::string>& kv, const std::string& key) {
    const std::string s = kv_get(kv, key);
    try {
        return std::stoull(s, nullptr, 0);
    } catch (const std::exception&) {
        SEQFM_CHECK(false, "config key " << key << " is not an unsigned integer: '" << s << "'");
    }
    return 0;
}

} // namespace seqfm
