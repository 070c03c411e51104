// ISO 10303-21 exchange-structure parser.
//
// The parser is purely syntactic: no EXPRESS schema is consulted, so the
// resulting entity graph is schema-agnostic. Downstream code (see brep.hpp)
// interprets entity names and argument positions.

#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "json.hpp"

namespace fablink::step {

using InstanceId = std::int64_t;

class StepError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed token, missing terminator, unterminated string or comment.
class SyntaxError : public StepError {
public:
    SyntaxError(std::size_t line, std::size_t column, const std::string& message);

    std::size_t line() const noexcept { return line_; }
    std::size_t column() const noexcept { return column_; }
    const std::string& detail() const noexcept { return detail_; }

private:
    std::size_t line_;
    std::size_t column_;
    std::string detail_;
};

class DuplicateId : public StepError {
public:
    explicit DuplicateId(InstanceId id);
    InstanceId id() const noexcept { return id_; }

private:
    InstanceId id_;
};

class MissingSection : public StepError {
public:
    explicit MissingSection(const std::string& section);
};

class DanglingRef : public StepError {
public:
    explicit DanglingRef(InstanceId id);
    InstanceId id() const noexcept { return id_; }

private:
    InstanceId id_;
};

/// `\S\`, `\X\`, `\X4\` and `\P?\` escapes need codepage context; rejected.
class UnsupportedEscape : public StepError {
public:
    using StepError::StepError;
};

class MalformedEscape : public StepError {
public:
    using StepError::StepError;
};

struct Arg;
using ArgList = std::vector<Arg>;

struct Unset {
    bool operator==(const Unset&) const = default;
};
struct Derived {
    bool operator==(const Derived&) const = default;
};
struct Text {
    std::string value;
    bool operator==(const Text&) const = default;
};
struct Enum {
    std::string value;
    bool operator==(const Enum&) const = default;
};
struct Ref {
    InstanceId id;
    bool operator==(const Ref&) const = default;
};
struct List {
    ArgList items;
    bool operator==(const List&) const;
};
struct Typed {
    std::string name;
    ArgList args;
    bool operator==(const Typed&) const;
};

struct Arg {
    std::variant<std::int64_t, double, Text, Enum, Ref, List, Typed, Unset, Derived> value;

    bool operator==(const Arg&) const = default;

    bool is_unset() const { return std::holds_alternative<Unset>(value); }
    bool is_derived() const { return std::holds_alternative<Derived>(value); }

    // Typed accessors throw StepError on a variant mismatch.
    std::int64_t as_integer() const;
    /// Integers are promoted; `1` and `1.` both read as 1.0.
    double as_real() const;
    const std::string& as_text() const;
    const std::string& as_enum() const;
    InstanceId as_ref() const;
    const ArgList& as_list() const;
    /// `.T.` / `.F.`; anything else is an error.
    bool as_logical() const;
};

struct Record {
    std::string name;
    ArgList args;
    bool operator==(const Record&) const = default;
};

struct Instance {
    InstanceId id = 0;
    std::vector<Record> records;

    bool operator==(const Instance&) const = default;

    bool is_complex() const noexcept { return records.size() > 1; }
    /// Entity name of a simple instance; empty for complex ones.
    std::string_view name() const noexcept;
    /// First record whose name matches, or nullptr.
    const Record* find(std::string_view entity) const noexcept;
};

struct StepFile {
    std::vector<Record> header;
    std::map<InstanceId, Instance> instances;
    std::string source_hash;

    bool operator==(const StepFile&) const = default;

    const Record& file_schema() const;
};

/// Parse a complete exchange structure. Throws a StepError subclass.
StepFile parse_step(std::string_view bytes);

const Instance& resolve_ref(const StepFile& file, InstanceId id);

/// Decode the body of a Part 21 string (the bytes between the quotes).
std::string decode_text(std::string_view raw);

/// Tagged JSON rendering used by `fablink parse --dump-json`.
nlohmann::json to_json(const Arg& arg);
nlohmann::json to_json(const Instance& inst);
nlohmann::json to_json(const StepFile& file);

}  // namespace fablink::step
