#pragma once

// Self-describing text container shared by every persisted model.
//
//   HKDET-MODEL <version>
//   kind <kind>
//   int <name> <value>
//   real <name> <value>            (17 significant digits)
//   string <name> <token>
//   matrix <name> <rows> <cols>
//   <rows lines of cols reals>
//   end
//
// Reals round-trip bit-exactly through the decimal text.

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "hkdet/core.hpp"

namespace hkdet {

inline constexpr const char* kModelMagic = "HKDET-MODEL";
inline constexpr int kModelVersion = 1;

inline std::string format_real(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline double parse_real(const std::string& tok) {
    const char* s = tok.c_str();
    char* end = nullptr;
    const double v = std::strtod(s, &end);
    if (end == s || *end != '\0') throw Error("not a number: '" + tok + "'");
    return v;
}

struct MatrixBlock {
    std::size_t rows = 0, cols = 0;
    std::vector<double> data;  // row-major

    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

class ModelFile {
public:
    ModelFile() = default;
    explicit ModelFile(std::string kind) : kind_(std::move(kind)) {}

    const std::string& kind() const { return kind_; }

    void set_int(const std::string& name, std::int64_t v) { ints_[name] = v; }
    void set_real(const std::string& name, double v) { reals_[name] = v; }
    void set_string(const std::string& name, const std::string& v) {
        if (v.empty() || v.find_first_of(" \t\r\n") != std::string::npos)
            throw Error("model string '" + name + "' must be a single non-empty token");
        strings_[name] = v;
    }
    void set_matrix(const std::string& name, std::size_t rows, std::size_t cols, std::vector<double> data) {
        if (data.size() != rows * cols) throw Error("matrix '" + name + "' size mismatch");
        matrices_[name] = MatrixBlock{rows, cols, std::move(data)};
    }

    std::int64_t get_int(const std::string& name) const { return lookup(ints_, name, "int"); }
    double get_real(const std::string& name) const { return lookup(reals_, name, "real"); }
    const std::string& get_string(const std::string& name) const { return lookup(strings_, name, "string"); }
    const MatrixBlock& get_matrix(const std::string& name) const { return lookup(matrices_, name, "matrix"); }
    bool has_matrix(const std::string& name) const { return matrices_.count(name) != 0; }

    void expect_kind(const std::string& kind) const {
        if (kind_ != kind) throw Error("expected a '" + kind + "' model, found '" + kind_ + "'");
    }

    void write(std::ostream& os) const {
        os << kModelMagic << ' ' << kModelVersion << '\n' << "kind " << kind_ << '\n';
        for (const auto& [k, v] : ints_) os << "int " << k << ' ' << v << '\n';
        for (const auto& [k, v] : reals_) os << "real " << k << ' ' << format_real(v) << '\n';
        for (const auto& [k, v] : strings_) os << "string " << k << ' ' << v << '\n';
        for (const auto& [k, m] : matrices_) {
            os << "matrix " << k << ' ' << m.rows << ' ' << m.cols << '\n';
            for (std::size_t r = 0; r < m.rows; ++r) {
                for (std::size_t c = 0; c < m.cols; ++c) {
                    if (c) os << ' ';
                    os << format_real(m(r, c));
                }
                os << '\n';
            }
        }
        os << "end\n";
    }

    static ModelFile read(std::istream& is) {
        ModelFile f;
        std::string line;
        std::size_t line_no = 0;
        auto fail = [&](const std::string& msg) -> Error {
            return Error("model file line " + std::to_string(line_no) + ": " + msg);
        };
        auto next = [&]() -> bool {
            ++line_no;
            return static_cast<bool>(std::getline(is, line));
        };
        if (!next()) throw fail("empty model file");
        {
            std::istringstream ls(line);
            std::string magic;
            int version = 0;
            if (!(ls >> magic >> version) || magic != kModelMagic) throw fail("missing " + std::string(kModelMagic) + " header");
            if (version != kModelVersion) throw fail("unsupported model version " + std::to_string(version));
        }
        bool ended = false;
        while (next()) {
            std::istringstream ls(line);
            std::string tag, name;
            ls >> tag;
            if (tag.empty()) continue;
            if (tag == "end") {
                ended = true;
                break;
            }
            if (tag == "kind") {
                if (!(ls >> f.kind_)) throw fail("missing kind");
                continue;
            }
            if (!(ls >> name)) throw fail("missing entry name");
            if (tag == "int") {
                std::int64_t v;
                if (!(ls >> v)) throw fail("bad int '" + name + "'");
                f.ints_[name] = v;
            } else if (tag == "real") {
                std::string tok;
                if (!(ls >> tok)) throw fail("bad real '" + name + "'");
                try {
                    f.reals_[name] = parse_real(tok);
                } catch (const Error& e) {
                    throw fail(e.what());
                }
            } else if (tag == "string") {
                std::string tok;
                if (!(ls >> tok)) throw fail("bad string '" + name + "'");
                f.strings_[name] = tok;
            } else if (tag == "matrix") {
                std::size_t rows, cols;
                if (!(ls >> rows >> cols)) throw fail("bad matrix header '" + name + "'");
                MatrixBlock m{rows, cols, {}};
                m.data.reserve(rows * cols);
                for (std::size_t r = 0; r < rows; ++r) {
                    if (!next()) throw fail("truncated matrix '" + name + "'");
                    std::istringstream rs(line);
                    std::string tok;
                    std::size_t c = 0;
                    while (rs >> tok) {
                        try {
                            m.data.push_back(parse_real(tok));
                        } catch (const Error& e) {
                            throw fail(e.what());
                        }
                        ++c;
                    }
                    if (c != cols) throw fail("matrix '" + name + "' row has " + std::to_string(c) + " values, expected " + std::to_string(cols));
                }
                f.matrices_[name] = std::move(m);
            } else {
                throw fail("unknown entry tag '" + tag + "'");
            }
        }
        if (!ended) throw fail("missing 'end'");
        return f;
    }

    void save(const std::string& path) const {
        std::ofstream os(path);
        if (!os) throw Error("cannot write model " + path);
        write(os);
    }

    static ModelFile load(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw Error("cannot open model " + path);
        try {
            return read(is);
        } catch (const Error& e) {
            throw Error(path + ": " + e.what());
        }
    }

private:
    template <class Map>
    static const typename Map::mapped_type& lookup(const Map& m, const std::string& name, const char* what) {
        auto it = m.find(name);
        if (it == m.end()) throw Error(std::string("model has no ") + what + " '" + name + "'");
        return it->second;
    }

    std::string kind_;
    std::map<std::string, std::int64_t> ints_;
    std::map<std::string, double> reals_;
    std::map<std::string, std::string> strings_;
    std::map<std::string, MatrixBlock> matrices_;
};

}  // namespace hkdet
