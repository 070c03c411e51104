#include <filesystem>
#include <fstream>
#include <random>
#include <string>

#include "doctest.h"
#include "fablink/step.hpp"

using namespace fablink::step;

namespace {

const std::string kHeader =
    "ISO-10303-21;\nHEADER;\nFILE_DESCRIPTION((''),'2;1');\n"
    "FILE_NAME('','',(''),(''),'','','');\nFILE_SCHEMA(('AP203'));\nENDSEC;\n";

std::string wrap(const std::string& data) { return kHeader + "DATA;\n" + data + "\nENDSEC;\nEND-ISO-10303-21;\n"; }

}  // namespace

TEST_CASE("single cartesian point") {
    const auto file = parse_step(
        "ISO-10303-21; HEADER; FILE_DESCRIPTION((''),'2;1'); FILE_NAME('','',(''),(''),'','',''); "
        "FILE_SCHEMA(('AP203')); ENDSEC; DATA; #1=CARTESIAN_POINT('P',(1.,2.,3.)); ENDSEC; END-ISO-10303-21;");
    REQUIRE(file.instances.size() == 1);
    const auto& inst = file.instances.at(1);
    CHECK(inst.id == 1);
    CHECK(inst.name() == "CARTESIAN_POINT");
    const auto& args = inst.records.front().args;
    REQUIRE(args.size() == 2);
    CHECK(args[0] == Arg{Text{"P"}});
    CHECK(args[1] == Arg{List{{Arg{1.0}, Arg{2.0}, Arg{3.0}}}});
    CHECK(file.header.size() == 3);
    CHECK(file.file_schema().args[0].as_list()[0].as_text() == "AP203");
    CHECK(file.source_hash.size() == 64);
}

TEST_CASE("oriented edge with derived arguments") {
    const auto file = parse_step(wrap("#7=ORIENTED_EDGE('',*,*,#5,.T.);"));
    const auto& args = file.instances.at(7).records.front().args;
    REQUIRE(args.size() == 5);
    CHECK(args[0] == Arg{Text{""}});
    CHECK(args[1].is_derived());
    CHECK(args[2].is_derived());
    CHECK(args[3] == Arg{Ref{5}});
    CHECK(args[4] == Arg{Enum{"T"}});
    CHECK(args[4].as_logical());
}

TEST_CASE("complex instance keeps every record") {
    const auto file = parse_step(wrap("#9=(B_SPLINE_CURVE(3,(#1,#2),.UNSPECIFIED.,.F.,.F.) BOUNDED_CURVE());"));
    const auto& inst = file.instances.at(9);
    CHECK(inst.is_complex());
    REQUIRE(inst.records.size() == 2);
    CHECK(inst.records[0].name == "B_SPLINE_CURVE");
    CHECK(inst.records[1].name == "BOUNDED_CURVE");
    CHECK(inst.records[1].args.empty());
    CHECK(inst.name().empty());
    CHECK(inst.find("BOUNDED_CURVE") != nullptr);
    CHECK(inst.records[0].args[0] == Arg{std::int64_t{3}});
}

TEST_CASE("duplicate ids are rejected") {
    try {
        parse_step(wrap("#3=PLANE('',#2); #3=PLANE('',#2);"));
        FAIL("expected DuplicateId");
    } catch (const DuplicateId& e) {
        CHECK(e.id() == 3);
    }
}

TEST_CASE("resolve_ref") {
    const auto file = parse_step(wrap("#1=CARTESIAN_POINT('',(0.,0.,0.));\n#4=DIRECTION('',(0.,0.,1.));\n"
                                      "#5=AXIS2_PLACEMENT_3D('',#1,#4,$);"));
    CHECK(resolve_ref(file, 1).id == 1);
    CHECK_THROWS_AS(resolve_ref(file, 99), DanglingRef);
    const auto& placement = resolve_ref(file, 5);
    const auto axis = placement.records.front().args[2].as_ref();
    CHECK(resolve_ref(file, axis).name() == "DIRECTION");
    CHECK(placement.records.front().args[3].is_unset());
}

TEST_CASE("real literal forms") {
    const auto file = parse_step(wrap("#1=X(1.,-2.5,1.E-3,6.02E23,+4.,0.5e2,7);"));
    const auto& a = file.instances.at(1).records.front().args;
    CHECK(std::get<double>(a[0].value) == 1.0);
    CHECK(std::get<double>(a[1].value) == -2.5);
    CHECK(std::get<double>(a[2].value) == 0.001);
    CHECK(std::get<double>(a[3].value) == 6.02e23);
    CHECK(std::get<double>(a[4].value) == 4.0);
    CHECK(std::get<double>(a[5].value) == 50.0);
    CHECK(std::get<std::int64_t>(a[6].value) == 7);
    CHECK(a[6].as_real() == 7.0);
}

TEST_CASE("typed parameters, binary literal, comments and lowercase names") {
    const auto file = parse_step(wrap("/* leading */ #2 = x_y ( LENGTH_MEASURE ( 2.5 ) , /* mid */ \"0FF\" , $ ) ;"));
    const auto& inst = file.instances.at(2);
    CHECK(inst.name() == "X_Y");
    const auto& a = inst.records.front().args;
    const auto& typed = std::get<Typed>(a[0].value);
    CHECK(typed.name == "LENGTH_MEASURE");
    CHECK(typed.args[0] == Arg{2.5});
    CHECK(a[1].as_text() == "0FF");
    CHECK(a[2].is_unset());
}

TEST_CASE("strings decode on parse") {
    const auto file = parse_step(wrap("#1=NAMED('it''s \\X2\\00E4\\X0\\');"));
    CHECK(file.instances.at(1).records.front().args[0].as_text() == "it's \xC3\xA4");
}

TEST_CASE("decode_text") {
    CHECK(decode_text("it''s") == "it's");
    CHECK(decode_text("\\X2\\00E4\\X0\\") == "\xC3\xA4");
    CHECK(decode_text("a\\\\b") == "a\\b");
    CHECK(decode_text("\\X2\\D83DDE00\\X0\\") == "\xF0\x9F\x98\x80");
    CHECK(decode_text("\\X2\\00410042\\X0\\C") == "ABC");
    CHECK(decode_text("plain ascii") == "plain ascii");
    CHECK_THROWS_AS(decode_text("\\S\\d"), UnsupportedEscape);
    CHECK_THROWS_AS(decode_text("\\X\\E4"), UnsupportedEscape);
    CHECK_THROWS_AS(decode_text("\\X4\\0001F600\\X0\\"), UnsupportedEscape);
    CHECK_THROWS_AS(decode_text("\\PA\\"), UnsupportedEscape);
    CHECK_THROWS_AS(decode_text("\\X2\\00E"), MalformedEscape);
    CHECK_THROWS_AS(decode_text("\\X2\\00E4"), MalformedEscape);
    CHECK_THROWS_AS(decode_text("\\X2\\00G4\\X0\\"), MalformedEscape);
    CHECK_THROWS_AS(decode_text("\\X2\\D83D\\X0\\"), MalformedEscape);
}

TEST_CASE("unsupported escape inside a file surfaces as a syntax error with location") {
    try {
        parse_step(wrap("#1=NAMED('\\S\\d');"));
        FAIL("expected SyntaxError");
    } catch (const SyntaxError& e) {
        CHECK(e.line() == 8);
        CHECK(std::string(e.what()).find("\\S\\") != std::string::npos);
    }
}

TEST_CASE("syntax errors carry line and column") {
    try {
        parse_step(wrap("#1=CARTESIAN_POINT('',(0.,0.,0.))\n#2=DIRECTION('',(0.,0.,1.));"));
        FAIL("expected SyntaxError");
    } catch (const SyntaxError& e) {
        CHECK(e.line() == 9);
        CHECK(e.column() == 1);
    }
    CHECK_THROWS_AS(parse_step(wrap("#1=X('unterminated);")), SyntaxError);
    CHECK_THROWS_AS(parse_step(wrap("/* open comment #1=X();")), SyntaxError);
    CHECK_THROWS_AS(parse_step(wrap("#0=X();")), SyntaxError);
    CHECK_THROWS_AS(parse_step(wrap("#1=X(#0);")), SyntaxError);
    CHECK_THROWS_AS(parse_step(wrap("#1=X(99999999999999999999);")), SyntaxError);
    CHECK_THROWS_AS(parse_step(wrap("#1=X(.T);")), SyntaxError);
    CHECK_THROWS_AS(parse_step(wrap("#1=X(1.E);")), SyntaxError);
    CHECK_THROWS_AS(parse_step(wrap("#1=X(@);")), SyntaxError);
    CHECK_THROWS_AS(parse_step(""), SyntaxError);
    CHECK_THROWS_AS(parse_step("garbage"), SyntaxError);
}

TEST_CASE("instance ids up to int64 max") {
    const auto file = parse_step(wrap("#9223372036854775807=X(#9223372036854775807);"));
    CHECK(file.instances.count(9223372036854775807LL) == 1);
    CHECK_THROWS_AS(parse_step(wrap("#9223372036854775808=X();")), SyntaxError);
}

TEST_CASE("missing sections") {
    CHECK_THROWS_AS(parse_step("ISO-10303-21; DATA; ENDSEC; END-ISO-10303-21;"), MissingSection);
    CHECK_THROWS_AS(parse_step(kHeader + "END-ISO-10303-21;"), MissingSection);
    CHECK_THROWS_AS(parse_step("ISO-10303-21; HEADER; FILE_NAME(''); ENDSEC; DATA; ENDSEC; END-ISO-10303-21;"),
                    MissingSection);
    CHECK_THROWS_AS(parse_step("ISO-10303-21; HEADER; FILE_SCHEMA(()); FILE_SCHEMA(()); ENDSEC; DATA; ENDSEC; "
                               "END-ISO-10303-21;"),
                    SyntaxError);
}

TEST_CASE("empty data section and edition 3 data parameters") {
    CHECK(parse_step(wrap("")).instances.empty());
    const auto f = parse_step(kHeader + "DATA('main',('AP242'));\n#1=A();\nENDSEC;\nEND-ISO-10303-21;");
    CHECK(f.instances.size() == 1);
}

TEST_CASE("determinism") {
    const std::string src = wrap("#1=CARTESIAN_POINT('P',(1.,2.,3.));\n#2=VERTEX_POINT('',#1);");
    const auto a = parse_step(src);
    const auto b = parse_step(src);
    CHECK(a == b);
    CHECK(a.source_hash == b.source_hash);
}

TEST_CASE("accessor mismatches throw") {
    const Arg a{std::int64_t{3}};
    CHECK_THROWS_AS(a.as_text(), StepError);
    CHECK_THROWS_AS(a.as_ref(), StepError);
    CHECK_THROWS_AS(Arg{Enum{"UNKNOWN"}}.as_logical(), StepError);
}

TEST_CASE("dump json uses tagged variants") {
    const auto file = parse_step(wrap("#7=ORIENTED_EDGE('',*,$,#5,.T.,(1,2.5));"));
    const auto j = to_json(file);
    const auto& args = j["instances"][0]["records"][0]["args"];
    CHECK(j["instances"][0]["id"] == 7);
    CHECK(args[0]["text"] == "");
    CHECK(args[1].contains("derived"));
    CHECK(args[2].contains("unset"));
    CHECK(args[3]["ref"] == 5);
    CHECK(args[4]["enum"] == "T");
    CHECK(args[5]["list"][0]["integer"] == 1);
    CHECK(args[5]["list"][1]["real"] == 2.5);
}

TEST_CASE("random byte mutations never escape as anything but StepError") {
    const std::string base = wrap(
        "#1=CARTESIAN_POINT('P',(1.,2.,3.));\n#2=DIRECTION('',(0.,0.,1.));\n"
        "#3=(B_SPLINE_CURVE(3,(#1,#2),.UNSPECIFIED.,.F.,.F.) BOUNDED_CURVE());\n#4=X('it''s',\"0F\",*,$);");
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 2000; ++trial) {
        std::string s = base;
        const int edits = 1 + static_cast<int>(rng() % 4);
        for (int e = 0; e < edits; ++e) {
            const std::size_t pos = rng() % s.size();
            switch (rng() % 3) {
                case 0: s[pos] = static_cast<char>(rng() % 256); break;
                case 1: s.erase(pos, 1); break;
                default: s.insert(pos, 1, static_cast<char>(rng() % 256)); break;
            }
        }
        try {
            (void)parse_step(s);
        } catch (const StepError&) {
        }
    }
    CHECK(true);
}

TEST_CASE("every corpus file parses") {
    std::size_t n = 0;
    for (const auto& entry : std::filesystem::directory_iterator(FABLINK_CORPUS_DIR)) {
        const auto ext = entry.path().extension();
        if (ext != ".step" && ext != ".stp") continue;
        INFO(entry.path().filename().string());
        std::ifstream in(entry.path(), std::ios::binary);
        const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        CHECK_NOTHROW(parse_step(text));
        ++n;
    }
    CHECK(n >= 10);
}
