#include "thermosr/toml.hpp"

#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

#include "thermosr/errors.hpp"

namespace thermosr {

namespace {

[[noreturn]] void fail(int line, const std::string& what) {
    throw config_error("config line " + std::to_string(line) + ": " + what);
}

struct Cursor {
    const std::string& s;
    std::size_t i = 0;
    int line;

    bool done() const { return i >= s.size(); }
    char peek() const { return s[i]; }
    void skip_ws() {
        while (!done() && (s[i] == ' ' || s[i] == '\t')) ++i;
    }
    // True when only whitespace or a comment remains.
    bool at_end_of_content() {
        skip_ws();
        return done() || s[i] == '#';
    }
};

bool is_bare_key_char(char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-';
}

std::string parse_key(Cursor& c) {
    std::string key;
    while (!c.done() && is_bare_key_char(c.peek())) key.push_back(c.s[c.i++]);
    if (key.empty()) fail(c.line, "expected a key");
    return key;
}

std::string parse_basic_string(Cursor& c) {
    ++c.i;  // opening quote
    std::string out;
    while (true) {
        if (c.done()) fail(c.line, "unterminated string");
        char ch = c.s[c.i++];
        if (ch == '"') return out;
        if (ch == '\\') {
            if (c.done()) fail(c.line, "unterminated escape");
            char e = c.s[c.i++];
            switch (e) {
                case '"': out.push_back('"'); break;
                case '\\': out.push_back('\\'); break;
                case 'n': out.push_back('\n'); break;
                case 't': out.push_back('\t'); break;
                default: fail(c.line, std::string("unsupported escape \\") + e);
            }
        } else {
            out.push_back(ch);
        }
    }
}

TomlValue parse_scalar(Cursor& c);

TomlValue parse_array(Cursor& c) {
    ++c.i;  // '['
    TomlValue v;
    v.kind = TomlValue::Kind::array;
    c.skip_ws();
    if (!c.done() && c.peek() == ']') {
        ++c.i;
        return v;
    }
    while (true) {
        c.skip_ws();
        if (c.done()) fail(c.line, "unterminated array");
        if (c.peek() == '[') fail(c.line, "nested arrays are not supported");
        v.items.push_back(parse_scalar(c));
        c.skip_ws();
        if (c.done()) fail(c.line, "unterminated array");
        char ch = c.s[c.i++];
        if (ch == ']') return v;
        if (ch != ',') fail(c.line, "expected ',' or ']' in array");
    }
}

TomlValue parse_scalar(Cursor& c) {
    c.skip_ws();
    if (c.done()) fail(c.line, "expected a value");
    char ch = c.peek();
    TomlValue v;
    if (ch == '"') {
        v.kind = TomlValue::Kind::string;
        v.s = parse_basic_string(c);
        return v;
    }
    // Bare token up to a delimiter.
    std::size_t start = c.i;
    while (!c.done() && c.peek() != ',' && c.peek() != ']' && c.peek() != '#' &&
           c.peek() != ' ' && c.peek() != '\t')
        ++c.i;
    std::string tok = c.s.substr(start, c.i - start);
    if (tok == "true" || tok == "false") {
        v.kind = TomlValue::Kind::boolean;
        v.b = tok == "true";
        return v;
    }
    const char* b = tok.data();
    const char* e = b + tok.size();
    long long iv = 0;
    auto ir = std::from_chars(b, e, iv);
    if (ir.ec == std::errc() && ir.ptr == e) {
        v.kind = TomlValue::Kind::integer;
        v.i = iv;
        return v;
    }
    double fv = 0.0;
    auto fr = std::from_chars(b, e, fv);
    if (fr.ec == std::errc() && fr.ptr == e) {
        v.kind = TomlValue::Kind::floating;
        v.f = fv;
        return v;
    }
    fail(c.line, "cannot parse value '" + tok + "'");
}

}  // namespace

double TomlValue::as_number() const {
    if (kind == Kind::integer) return static_cast<double>(i);
    if (kind == Kind::floating) return f;
    throw config_error("value is not a number");
}

TomlTable parse_toml_text(const std::string& text) {
    TomlTable t;
    std::istringstream in(text);
    std::string raw;
    std::string section;
    int line = 0;
    while (std::getline(in, raw)) {
        ++line;
        if (!raw.empty() && raw.back() == '\r') raw.pop_back();
        Cursor c{raw, 0, line};
        if (c.at_end_of_content()) continue;

        if (c.peek() == '[') {
            ++c.i;
            c.skip_ws();
            std::string name = parse_key(c);
            while (!c.done() && c.peek() == '.') {
                ++c.i;
                name += "." + parse_key(c);
            }
            c.skip_ws();
            if (c.done() || c.s[c.i++] != ']') fail(line, "expected ']' after section name");
            if (!c.at_end_of_content()) fail(line, "unexpected text after section header");
            section = name;
            continue;
        }

        std::string key = parse_key(c);
        c.skip_ws();
        if (c.done() || c.s[c.i++] != '=') fail(line, "expected '=' after key '" + key + "'");
        TomlValue v;
        c.skip_ws();
        if (!c.done() && c.peek() == '[')
            v = parse_array(c);
        else
            v = parse_scalar(c);
        if (!c.at_end_of_content()) fail(line, "unexpected text after value of '" + key + "'");

        const std::string full = section.empty() ? key : section + "." + key;
        if (t.kv.count(full)) fail(line, "duplicate key '" + full + "'");
        t.kv[full] = std::move(v);
        t.lines[full] = line;
    }
    return t;
}

TomlTable load_toml(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw config_error("cannot open config: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_toml_text(ss.str());
}

const TomlValue* TomlReader::take(const std::string& key) {
    auto it = t_.kv.find(key);
    if (it == t_.kv.end()) return nullptr;
    used_.insert(key);
    return &it->second;
}

void TomlReader::type_error(const std::string& key, const char* want) const {
    int line = 0;
    auto it = t_.lines.find(key);
    if (it != t_.lines.end()) line = it->second;
    throw config_error("config line " + std::to_string(line) + ": key '" + key + "' must be " +
                       want);
}

bool TomlReader::boolean(const std::string& key, bool def) {
    const TomlValue* v = take(key);
    if (!v) return def;
    if (v->kind != TomlValue::Kind::boolean) type_error(key, "a boolean");
    return v->b;
}

long long TomlReader::integer(const std::string& key, long long def) {
    const TomlValue* v = take(key);
    if (!v) return def;
    if (v->kind != TomlValue::Kind::integer) type_error(key, "an integer");
    return v->i;
}

double TomlReader::number(const std::string& key, double def) {
    const TomlValue* v = take(key);
    if (!v) return def;
    if (v->kind != TomlValue::Kind::integer && v->kind != TomlValue::Kind::floating)
        type_error(key, "a number");
    return v->as_number();
}

std::string TomlReader::str(const std::string& key, const std::string& def) {
    const TomlValue* v = take(key);
    if (!v) return def;
    if (v->kind != TomlValue::Kind::string) type_error(key, "a string");
    return v->s;
}

std::vector<int> TomlReader::int_array(const std::string& key, const std::vector<int>& def) {
    const TomlValue* v = take(key);
    if (!v) return def;
    if (v->kind != TomlValue::Kind::array) type_error(key, "an array of integers");
    std::vector<int> out;
    for (const auto& e : v->items) {
        if (e.kind != TomlValue::Kind::integer) type_error(key, "an array of integers");
        out.push_back(static_cast<int>(e.i));
    }
    return out;
}

void TomlReader::finish() const {
    for (const auto& [key, _] : t_.kv)
        if (!used_.count(key)) {
            int line = 0;
            auto it = t_.lines.find(key);
            if (it != t_.lines.end()) line = it->second;
            throw config_error("config line " + std::to_string(line) + ": unknown key '" + key +
                               "'");
        }
}

}  // namespace thermosr
