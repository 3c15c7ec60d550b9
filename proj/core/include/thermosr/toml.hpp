#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

namespace thermosr {

// Minimal TOML reader for the experiment config schema: [section] headers,
// bare keys, and scalar values (bool, integer, float, string, flat arrays).
// No nested tables beyond dotted section names, no multi-line values. Strict
// by construction: the schema layer rejects any key it did not consume.

struct TomlValue {
    enum class Kind { boolean, integer, floating, string, array };
    Kind kind = Kind::integer;
    bool b = false;
    long long i = 0;
    double f = 0.0;
    std::string s;
    std::vector<TomlValue> items;  // array elements, scalars only

    // integer or floating, widened to double.
    double as_number() const;
};

struct TomlTable {
    // Flattened: "lr" under [optimizer] is stored as "optimizer.lr".
    std::map<std::string, TomlValue> kv;
    std::map<std::string, int> lines;  // source line of each key, for diagnostics
};

// Throws config_error with a line number on any syntax problem.
TomlTable parse_toml_text(const std::string& text);
TomlTable load_toml(const std::string& path);

// Typed access that tracks which keys were read. Absent keys fall back to
// the default; wrong types throw config_error; finish() throws on keys the
// schema never asked for.
class TomlReader {
public:
    explicit TomlReader(TomlTable t) : t_(std::move(t)) {}

    bool boolean(const std::string& key, bool def);
    long long integer(const std::string& key, long long def);
    double number(const std::string& key, double def);
    std::string str(const std::string& key, const std::string& def);
    std::vector<int> int_array(const std::string& key, const std::vector<int>& def);

    void finish() const;

private:
    const TomlValue* take(const std::string& key);
    [[noreturn]] void type_error(const std::string& key, const char* want) const;

    TomlTable t_;
    std::set<std::string> used_;
};

}  // namespace thermosr
