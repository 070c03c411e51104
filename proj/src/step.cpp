#include "fablink/step.hpp"

#include <charconv>
#include <cmath>
#include <optional>
#include <sstream>
#include <system_error>

#include "fablink/hash.hpp"

namespace fablink::step {

namespace {

std::string located(std::size_t line, std::size_t column, const std::string& message) {
    std::ostringstream os;
    os << "line " << line << ", column " << column << ": " << message;
    return os.str();
}

constexpr int kMaxNesting = 256;

bool is_upper_start(char c) { return (c >= 'A' && c <= 'Z') || c == '_'; }
bool is_letter(char c) { return (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') || c == '_'; }
bool is_digit(char c) { return c >= '0' && c <= '9'; }
bool is_name_char(char c) { return is_letter(c) || is_digit(c); }

bool valid_entity_name(std::string_view s) {
    if (s.empty() || !is_upper_start(s.front())) return false;
    for (char c : s) {
        if (!((c >= 'A' && c <= 'Z') || is_digit(c) || c == '_')) return false;
    }
    return true;
}

int hex_value(char c) {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    return -1;
}

void append_utf8(std::string& out, std::uint32_t cp) {
    if (cp < 0x80) {
        out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
        out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
        out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
        out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
}

enum class Tok {
    Keyword,
    InstanceName,
    Integer,
    Real,
    String,
    Binary,
    Enumeration,
    Dollar,
    Star,
    LParen,
    RParen,
    Comma,
    Equals,
    Semicolon,
    End,
};

struct Token {
    Tok kind = Tok::End;
    std::string_view text;  // raw lexeme (string/binary: body only)
    std::size_t line = 1;
    std::size_t column = 1;
};

class Lexer {
public:
    explicit Lexer(std::string_view src) : src_(src) {}

    Token next() {
        skip_blank();
        Token t;
        t.line = line_;
        t.column = col_;
        if (pos_ >= src_.size()) return t;

        const char c = src_[pos_];
        const std::size_t start = pos_;
        switch (c) {
            case '(': advance(); t.kind = Tok::LParen; break;
            case ')': advance(); t.kind = Tok::RParen; break;
            case ',': advance(); t.kind = Tok::Comma; break;
            case '=': advance(); t.kind = Tok::Equals; break;
            case ';': advance(); t.kind = Tok::Semicolon; break;
            case '$': advance(); t.kind = Tok::Dollar; break;
            case '*': advance(); t.kind = Tok::Star; break;
            case '\'': lex_string(t); return t;
            case '"': lex_binary(t); return t;
            case '#': lex_instance_name(t); return t;
            case '.': lex_enum(t); return t;
            default:
                if (is_digit(c) || c == '+' || c == '-') {
                    lex_number(t);
                    return t;
                }
                if (is_letter(c)) {
                    while (pos_ < src_.size() && (is_name_char(src_[pos_]) || src_[pos_] == '-')) advance();
                    t.kind = Tok::Keyword;
                    break;
                }
                fail(t, std::string("unexpected character '") + printable(c) + "'");
        }
        t.text = src_.substr(start, pos_ - start);
        return t;
    }

private:
    [[noreturn]] void fail(const Token& at, const std::string& msg) const {
        throw SyntaxError(at.line, at.column, msg);
    }
    [[noreturn]] void fail_here(const std::string& msg) const { throw SyntaxError(line_, col_, msg); }

    static std::string printable(char c) {
        const auto u = static_cast<unsigned char>(c);
        if (u >= 0x20 && u < 0x7F) return std::string(1, c);
        std::ostringstream os;
        os << "\\x" << std::hex << static_cast<int>(u);
        return os.str();
    }

    void advance() {
        if (src_[pos_] == '\n') {
            ++line_;
            col_ = 1;
        } else {
            ++col_;
        }
        ++pos_;
    }

    void skip_blank() {
        while (pos_ < src_.size()) {
            const char c = src_[pos_];
            if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
                advance();
            } else if (c == '/' && pos_ + 1 < src_.size() && src_[pos_ + 1] == '*') {
                const std::size_t l = line_, col = col_;
                advance();
                advance();
                for (;;) {
                    if (pos_ >= src_.size()) throw SyntaxError(l, col, "unterminated comment");
                    if (src_[pos_] == '*' && pos_ + 1 < src_.size() && src_[pos_ + 1] == '/') {
                        advance();
                        advance();
                        break;
                    }
                    advance();
                }
            } else {
                break;
            }
        }
    }

    void lex_string(Token& t) {
        advance();
        const std::size_t body = pos_;
        for (;;) {
            if (pos_ >= src_.size()) fail(t, "unterminated string");
            if (src_[pos_] == '\'') {
                if (pos_ + 1 < src_.size() && src_[pos_ + 1] == '\'') {
                    advance();
                    advance();
                    continue;
                }
                break;
            }
            advance();
        }
        t.kind = Tok::String;
        t.text = src_.substr(body, pos_ - body);
        advance();
    }

    void lex_binary(Token& t) {
        advance();
        const std::size_t body = pos_;
        while (pos_ < src_.size() && src_[pos_] != '"') {
            if (hex_value(src_[pos_]) < 0) fail_here("invalid character in binary literal");
            advance();
        }
        if (pos_ >= src_.size()) fail(t, "unterminated binary literal");
        t.kind = Tok::Binary;
        t.text = src_.substr(body, pos_ - body);
        if (t.text.empty() || t.text.front() > '3') fail(t, "binary literal must start with 0-3");
        advance();
    }

    void lex_instance_name(Token& t) {
        advance();
        const std::size_t digits = pos_;
        while (pos_ < src_.size() && is_digit(src_[pos_])) advance();
        if (pos_ == digits) fail(t, "expected digits after '#'");
        t.kind = Tok::InstanceName;
        t.text = src_.substr(digits, pos_ - digits);
    }

    void lex_enum(Token& t) {
        advance();
        const std::size_t body = pos_;
        if (pos_ >= src_.size() || !is_letter(src_[pos_])) fail(t, "malformed enumeration");
        while (pos_ < src_.size() && is_name_char(src_[pos_])) advance();
        if (pos_ >= src_.size() || src_[pos_] != '.') fail(t, "enumeration missing closing '.'");
        t.kind = Tok::Enumeration;
        t.text = src_.substr(body, pos_ - body);
        advance();
    }

    void lex_number(Token& t) {
        const std::size_t start = pos_;
        if (src_[pos_] == '+' || src_[pos_] == '-') advance();
        const std::size_t int_start = pos_;
        while (pos_ < src_.size() && is_digit(src_[pos_])) advance();
        if (pos_ == int_start) fail(t, "expected digits in number");
        bool real = false;
        if (pos_ < src_.size() && src_[pos_] == '.') {
            real = true;
            advance();
            while (pos_ < src_.size() && is_digit(src_[pos_])) advance();
        }
        if (pos_ < src_.size() && (src_[pos_] == 'E' || src_[pos_] == 'e')) {
            real = true;
            advance();
            if (pos_ < src_.size() && (src_[pos_] == '+' || src_[pos_] == '-')) advance();
            const std::size_t exp_start = pos_;
            while (pos_ < src_.size() && is_digit(src_[pos_])) advance();
            if (pos_ == exp_start) fail(t, "malformed exponent");
        }
        t.kind = real ? Tok::Real : Tok::Integer;
        t.text = src_.substr(start, pos_ - start);
    }

    std::string_view src_;
    std::size_t pos_ = 0;
    std::size_t line_ = 1;
    std::size_t col_ = 1;
};

const char* describe(Tok k) {
    switch (k) {
        case Tok::Keyword: return "keyword";
        case Tok::InstanceName: return "instance name";
        case Tok::Integer: return "integer";
        case Tok::Real: return "real";
        case Tok::String: return "string";
        case Tok::Binary: return "binary";
        case Tok::Enumeration: return "enumeration";
        case Tok::Dollar: return "'$'";
        case Tok::Star: return "'*'";
        case Tok::LParen: return "'('";
        case Tok::RParen: return "')'";
        case Tok::Comma: return "','";
        case Tok::Equals: return "'='";
        case Tok::Semicolon: return "';'";
        case Tok::End: return "end of input";
    }
    return "token";
}

class Parser {
public:
    explicit Parser(std::string_view src) : lex_(src) { tok_ = lex_.next(); }

    StepFile parse() {
        StepFile file;
        expect_keyword("ISO-10303-21");
        expect(Tok::Semicolon);

        if (!is_keyword("HEADER")) throw MissingSection("HEADER");
        bump();
        expect(Tok::Semicolon);
        while (!is_keyword("ENDSEC")) {
            if (tok_.kind == Tok::End) fail("unterminated HEADER section");
            file.header.push_back(parse_record(0));
            expect(Tok::Semicolon);
        }
        bump();
        expect(Tok::Semicolon);

        std::size_t schema_records = 0;
        for (const auto& r : file.header) schema_records += r.name == "FILE_SCHEMA" ? 1 : 0;
        if (schema_records == 0) throw MissingSection("FILE_SCHEMA");
        if (schema_records > 1) fail("header contains more than one FILE_SCHEMA");

        bool saw_data = false;
        while (is_keyword("DATA")) {
            saw_data = true;
            bump();
            if (tok_.kind == Tok::LParen) {
                // Edition 3 named data sections; parameters are not retained.
                bump();
                parse_args_until_rparen(0);
            }
            expect(Tok::Semicolon);
            while (!is_keyword("ENDSEC")) parse_instance(file);
            bump();
            expect(Tok::Semicolon);
        }
        if (!saw_data) {
            if (tok_.kind == Tok::Keyword && tok_.text != "END-ISO-10303-21") {
                fail("unexpected section '" + std::string(tok_.text) + "'");
            }
            throw MissingSection("DATA");
        }
        expect_keyword("END-ISO-10303-21");
        expect(Tok::Semicolon);
        return file;
    }

private:
    [[noreturn]] void fail(const std::string& msg) const { throw SyntaxError(tok_.line, tok_.column, msg); }

    void bump() { tok_ = lex_.next(); }

    bool is_keyword(std::string_view kw) const { return tok_.kind == Tok::Keyword && tok_.text == kw; }

    void expect(Tok k) {
        if (tok_.kind != k) {
            fail(std::string("expected ") + describe(k) + ", found " + describe(tok_.kind));
        }
        bump();
    }

    void expect_keyword(std::string_view kw) {
        if (!is_keyword(kw)) fail("expected '" + std::string(kw) + "'");
        bump();
    }

    std::string entity_name() {
        if (tok_.kind != Tok::Keyword) fail(std::string("expected entity name, found ") + describe(tok_.kind));
        std::string name(tok_.text);
        for (auto& c : name) {
            if (c >= 'a' && c <= 'z') c = static_cast<char>(c - 'a' + 'A');
        }
        if (!valid_entity_name(name)) fail("invalid entity name '" + name + "'");
        bump();
        return name;
    }

    InstanceId instance_id() {
        std::int64_t v = 0;
        const auto* first = tok_.text.data();
        const auto* last = first + tok_.text.size();
        auto [ptr, ec] = std::from_chars(first, last, v);
        if (ec != std::errc() || ptr != last) fail("instance id out of range");
        if (v <= 0) fail("instance id must be positive");
        bump();
        return v;
    }

    Record parse_record(int depth) {
        Record r;
        r.name = entity_name();
        expect(Tok::LParen);
        r.args = parse_args_until_rparen(depth + 1);
        return r;
    }

    // Called after '(' has been consumed; consumes the matching ')'.
    ArgList parse_args_until_rparen(int depth) {
        if (depth > kMaxNesting) fail("nesting too deep");
        ArgList args;
        if (tok_.kind == Tok::RParen) {
            bump();
            return args;
        }
        for (;;) {
            args.push_back(parse_arg(depth));
            if (tok_.kind == Tok::Comma) {
                bump();
                continue;
            }
            expect(Tok::RParen);
            return args;
        }
    }

    Arg parse_arg(int depth) {
        Arg a;
        switch (tok_.kind) {
            case Tok::Integer: {
                std::int64_t v = 0;
                std::string_view s = tok_.text;
                if (!s.empty() && s.front() == '+') s.remove_prefix(1);
                auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
                if (ec != std::errc() || ptr != s.data() + s.size()) fail("integer out of range");
                a.value = v;
                bump();
                break;
            }
            case Tok::Real: {
                double v = 0.0;
                std::string_view s = tok_.text;
                if (!s.empty() && s.front() == '+') s.remove_prefix(1);
                auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
                if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) {
                    fail("real out of range");
                }
                a.value = v;
                bump();
                break;
            }
            case Tok::String: {
                try {
                    a.value = Text{decode_text(tok_.text)};
                } catch (const StepError& e) {
                    fail(e.what());
                }
                bump();
                break;
            }
            case Tok::Binary:
                a.value = Text{std::string(tok_.text)};
                bump();
                break;
            case Tok::Enumeration:
                a.value = Enum{std::string(tok_.text)};
                bump();
                break;
            case Tok::Dollar:
                a.value = Unset{};
                bump();
                break;
            case Tok::Star:
                a.value = Derived{};
                bump();
                break;
            case Tok::InstanceName:
                a.value = Ref{instance_id()};
                break;
            case Tok::LParen:
                bump();
                a.value = List{parse_args_until_rparen(depth + 1)};
                break;
            case Tok::Keyword: {
                Typed typed;
                typed.name = entity_name();
                expect(Tok::LParen);
                typed.args = parse_args_until_rparen(depth + 1);
                a.value = std::move(typed);
                break;
            }
            default:
                fail(std::string("unexpected ") + describe(tok_.kind) + " in parameter list");
        }
        return a;
    }

    void parse_instance(StepFile& file) {
        if (tok_.kind != Tok::InstanceName) {
            if (tok_.kind == Tok::End) fail("unterminated DATA section");
            fail(std::string("expected instance name, found ") + describe(tok_.kind));
        }
        Instance inst;
        inst.id = instance_id();
        expect(Tok::Equals);
        if (tok_.kind == Tok::LParen) {
            bump();
            while (tok_.kind != Tok::RParen) inst.records.push_back(parse_record(0));
            bump();
            if (inst.records.empty()) fail("complex instance without records");
        } else {
            inst.records.push_back(parse_record(0));
        }
        expect(Tok::Semicolon);
        const InstanceId id = inst.id;
        if (!file.instances.emplace(id, std::move(inst)).second) throw DuplicateId(id);
    }

    Lexer lex_;
    Token tok_;
};

[[noreturn]] void mismatch(const char* wanted) {
    throw StepError(std::string("argument is not ") + wanted);
}

}  // namespace

SyntaxError::SyntaxError(std::size_t line, std::size_t column, const std::string& message)
    : StepError(located(line, column, message)), line_(line), column_(column), detail_(message) {}

DuplicateId::DuplicateId(InstanceId id)
    : StepError("duplicate instance id #" + std::to_string(id)), id_(id) {}

MissingSection::MissingSection(const std::string& section)
    : StepError("missing " + section + " section") {}

DanglingRef::DanglingRef(InstanceId id)
    : StepError("reference to undefined instance #" + std::to_string(id)), id_(id) {}

bool List::operator==(const List& o) const { return items == o.items; }
bool Typed::operator==(const Typed& o) const { return name == o.name && args == o.args; }

std::int64_t Arg::as_integer() const {
    if (const auto* v = std::get_if<std::int64_t>(&value)) return *v;
    mismatch("an integer");
}

double Arg::as_real() const {
    if (const auto* v = std::get_if<double>(&value)) return *v;
    if (const auto* v = std::get_if<std::int64_t>(&value)) return static_cast<double>(*v);
    mismatch("a number");
}

const std::string& Arg::as_text() const {
    if (const auto* v = std::get_if<Text>(&value)) return v->value;
    mismatch("a string");
}

const std::string& Arg::as_enum() const {
    if (const auto* v = std::get_if<Enum>(&value)) return v->value;
    mismatch("an enumeration");
}

InstanceId Arg::as_ref() const {
    if (const auto* v = std::get_if<Ref>(&value)) return v->id;
    mismatch("an instance reference");
}

const ArgList& Arg::as_list() const {
    if (const auto* v = std::get_if<List>(&value)) return v->items;
    mismatch("a list");
}

bool Arg::as_logical() const {
    const auto& e = as_enum();
    if (e == "T") return true;
    if (e == "F") return false;
    throw StepError("expected .T. or .F., found ." + e + ".");
}

std::string_view Instance::name() const noexcept {
    return records.size() == 1 ? std::string_view(records.front().name) : std::string_view();
}

const Record* Instance::find(std::string_view entity) const noexcept {
    for (const auto& r : records) {
        if (r.name == entity) return &r;
    }
    return nullptr;
}

const Record& StepFile::file_schema() const {
    for (const auto& r : header) {
        if (r.name == "FILE_SCHEMA") return r;
    }
    throw MissingSection("FILE_SCHEMA");
}

StepFile parse_step(std::string_view bytes) {
    StepFile file = Parser(bytes).parse();
    file.source_hash = sha256_hex(bytes);
    return file;
}

const Instance& resolve_ref(const StepFile& file, InstanceId id) {
    auto it = file.instances.find(id);
    if (it == file.instances.end()) throw DanglingRef(id);
    return it->second;
}

std::string decode_text(std::string_view raw) {
    std::string out;
    out.reserve(raw.size());
    std::size_t i = 0;
    auto starts = [&](std::string_view s) { return raw.substr(i, s.size()) == s; };
    while (i < raw.size()) {
        const char c = raw[i];
        if (c == '\'') {
            out.push_back('\'');
            i += (i + 1 < raw.size() && raw[i + 1] == '\'') ? 2 : 1;
            continue;
        }
        if (c != '\\') {
            out.push_back(c);
            ++i;
            continue;
        }
        if (starts("\\\\")) {
            out.push_back('\\');
            i += 2;
        } else if (starts("\\X2\\")) {
            i += 4;
            std::uint32_t pending_high = 0;
            for (;;) {
                if (starts("\\X0\\")) {
                    i += 4;
                    break;
                }
                if (i + 4 > raw.size()) throw MalformedEscape("truncated \\X2\\ escape block");
                std::uint32_t unit = 0;
                for (std::size_t k = 0; k < 4; ++k) {
                    const int h = hex_value(raw[i + k]);
                    if (h < 0) throw MalformedEscape("non-hex digit in \\X2\\ escape block");
                    unit = (unit << 4) | static_cast<std::uint32_t>(h);
                }
                i += 4;
                if (unit >= 0xD800 && unit <= 0xDBFF) {
                    if (pending_high != 0) throw MalformedEscape("unpaired surrogate in \\X2\\ block");
                    pending_high = unit;
                    continue;
                }
                if (unit >= 0xDC00 && unit <= 0xDFFF) {
                    if (pending_high == 0) throw MalformedEscape("unpaired surrogate in \\X2\\ block");
                    append_utf8(out, 0x10000 + ((pending_high - 0xD800) << 10) + (unit - 0xDC00));
                    pending_high = 0;
                    continue;
                }
                if (pending_high != 0) throw MalformedEscape("unpaired surrogate in \\X2\\ block");
                append_utf8(out, unit);
            }
            if (pending_high != 0) throw MalformedEscape("unpaired surrogate in \\X2\\ block");
        } else if (starts("\\X4\\")) {
            throw UnsupportedEscape("\\X4\\ escapes are not supported");
        } else if (starts("\\X\\")) {
            throw UnsupportedEscape("\\X\\ escapes are not supported");
        } else if (starts("\\S\\")) {
            throw UnsupportedEscape("\\S\\ escapes are not supported");
        } else if (raw.size() - i >= 4 && raw[i + 1] == 'P' && raw[i + 2] >= 'A' && raw[i + 2] <= 'I' &&
                   raw[i + 3] == '\\') {
            throw UnsupportedEscape("\\P?\\ code page directives are not supported");
        } else {
            out.push_back('\\');
            ++i;
        }
    }
    return out;
}

nlohmann::json to_json(const Arg& arg) {
    using nlohmann::json;
    return std::visit(
        [](const auto& v) -> json {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, std::int64_t>) {
                return {{"integer", v}};
            } else if constexpr (std::is_same_v<T, double>) {
                return {{"real", v}};
            } else if constexpr (std::is_same_v<T, Text>) {
                return {{"text", v.value}};
            } else if constexpr (std::is_same_v<T, Enum>) {
                return {{"enum", v.value}};
            } else if constexpr (std::is_same_v<T, Ref>) {
                return {{"ref", v.id}};
            } else if constexpr (std::is_same_v<T, List>) {
                json items = json::array();
                for (const auto& a : v.items) items.push_back(to_json(a));
                return {{"list", items}};
            } else if constexpr (std::is_same_v<T, Typed>) {
                json items = json::array();
                for (const auto& a : v.args) items.push_back(to_json(a));
                return {{"typed", {{"name", v.name}, {"args", items}}}};
            } else if constexpr (std::is_same_v<T, Unset>) {
                return {{"unset", nullptr}};
            } else {
                return {{"derived", nullptr}};
            }
        },
        arg.value);
}

namespace {
nlohmann::json record_json(const Record& r) {
    nlohmann::json args = nlohmann::json::array();
    for (const auto& a : r.args) args.push_back(to_json(a));
    return {{"name", r.name}, {"args", args}};
}
}  // namespace

nlohmann::json to_json(const Instance& inst) {
    nlohmann::json records = nlohmann::json::array();
    for (const auto& r : inst.records) records.push_back(record_json(r));
    return {{"id", inst.id}, {"records", records}};
}

nlohmann::json to_json(const StepFile& file) {
    nlohmann::json header = nlohmann::json::array();
    for (const auto& r : file.header) header.push_back(record_json(r));
    nlohmann::json instances = nlohmann::json::array();
    for (const auto& [id, inst] : file.instances) instances.push_back(to_json(inst));
    return {{"source_hash", file.source_hash}, {"header", header}, {"instances", instances}};
}

}  // namespace fablink::step
