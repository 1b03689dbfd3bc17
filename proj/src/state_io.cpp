#include <bit>
#include <cstring>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "adapprox/optim.hpp"

namespace adapprox {

// Layout (all integers little-endian):
//   "ADPX1" | u32 version | str name | u64 rows | u64 cols | u64 step | u64 rank
//   | u8 has_first [matrix] | u8 kind (0 dense, 1 factored) | matrix or (matrix q, matrix ut)
// matrix = u64 rows | u64 cols | rows*cols IEEE-754 doubles as u64 bit patterns.

namespace {

constexpr char kMagic[5] = {'A', 'D', 'P', 'X', '1'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 32;

class Writer {
public:
    explicit Writer(std::ostream& out) : out_(out) {}

    void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }

    void u8(std::uint8_t v) { bytes(&v, 1); }

    void u32(std::uint32_t v) {
        unsigned char b[4];
        for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
        bytes(b, 4);
    }

    void u64(std::uint64_t v) {
        unsigned char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
        bytes(b, 8);
    }

    void str(const std::string& s) {
        u64(s.size());
        bytes(s.data(), s.size());
    }

    void matrix(const Matrix& m) {
        u64(m.rows());
        u64(m.cols());
        for (double x : m.data()) u64(std::bit_cast<std::uint64_t>(x));
    }

private:
    std::ostream& out_;
};

class Reader {
public:
    explicit Reader(std::istream& in) : in_(in) {}

    void bytes(void* p, std::size_t n) {
        in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n) {
            throw std::runtime_error("state snapshot: truncated stream");
        }
    }

    std::uint8_t u8() {
        std::uint8_t v = 0;
        bytes(&v, 1);
        return v;
    }

    std::uint32_t u32() {
        unsigned char b[4];
        bytes(b, 4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
        return v;
    }

    std::uint64_t u64() {
        unsigned char b[8];
        bytes(b, 8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
        return v;
    }

    std::string str() {
        const std::uint64_t n = u64();
        if (n > (1u << 20)) throw std::runtime_error("state snapshot: implausible name length");
        std::string s(n, '\0');
        bytes(s.data(), n);
        return s;
    }

    Matrix matrix() {
        const std::uint64_t rows = u64();
        const std::uint64_t cols = u64();
        if (rows == 0 || cols == 0 || rows > kMaxElements || cols > kMaxElements ||
            rows * cols > kMaxElements) {
            throw std::runtime_error("state snapshot: invalid matrix dimensions");
        }
        std::vector<double> data(rows * cols);
        for (double& x : data) x = std::bit_cast<double>(u64());
        return Matrix(rows, cols, std::move(data));
    }

private:
    std::istream& in_;
};

}  // namespace

void write_state(std::ostream& out, const ParamState& state) {
    Writer w(out);
    w.bytes(kMagic, sizeof kMagic);
    w.u32(kVersion);
    w.str(state.name);
    w.u64(state.rows);
    w.u64(state.cols);
    w.u64(state.step);
    w.u64(state.rank);
    w.u8(state.first_moment ? 1 : 0);
    if (state.first_moment) w.matrix(*state.first_moment);
    if (state.is_factored()) {
        w.u8(1);
        w.matrix(state.factors().q);
        w.matrix(state.factors().ut);
    } else {
        w.u8(0);
        w.matrix(state.dense_second_moment());
    }
    if (!out) throw std::runtime_error("state snapshot: write failed");
}

ParamState read_state(std::istream& in) {
    Reader r(in);
    char magic[sizeof kMagic];
    r.bytes(magic, sizeof magic);
    if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
        throw std::runtime_error("state snapshot: bad magic header");
    }
    const std::uint32_t version = r.u32();
    if (version != kVersion) {
        throw std::runtime_error("state snapshot: unsupported version " + std::to_string(version));
    }
    std::string name = r.str();
    const std::uint64_t rows = r.u64();
    const std::uint64_t cols = r.u64();
    const std::uint64_t step = r.u64();
    const std::uint64_t rank = r.u64();
    std::optional<Matrix> first;
    switch (r.u8()) {
        case 0: break;
        case 1: first = r.matrix(); break;
        default: throw std::runtime_error("state snapshot: bad first-moment flag");
    }
    const std::uint8_t kind = r.u8();
    if (kind > 1) throw std::runtime_error("state snapshot: bad second-moment kind");

    ParamState state{std::move(name), rows, cols, std::move(first), Matrix(1, 1), rank, step};
    if (kind == 1) {
        Matrix q = r.matrix();
        Matrix ut = r.matrix();
        if (q.rows() != rows || ut.rows() != cols || q.cols() != ut.cols() || q.cols() != rank) {
            throw std::runtime_error("state snapshot: factor shapes inconsistent with the header");
        }
        state.second_moment = FactorPair{std::move(q), std::move(ut)};
    } else {
        Matrix v = r.matrix();
        if (v.rows() != rows || v.cols() != cols) {
            throw std::runtime_error("state snapshot: second moment shape inconsistent");
        }
        state.second_moment = std::move(v);
    }
    if (state.first_moment &&
        (state.first_moment->rows() != rows || state.first_moment->cols() != cols)) {
        throw std::runtime_error("state snapshot: first moment shape inconsistent");
    }
    return state;
}

std::string state_serialize(const ParamState& state) {
    std::ostringstream out(std::ios::binary);
    write_state(out, state);
    return std::move(out).str();
}

ParamState state_deserialize(const std::string& bytes) {
    std::istringstream in(bytes, std::ios::binary);
    ParamState state = read_state(in);
    if (in.peek() != std::char_traits<char>::eof()) {
        throw std::runtime_error("state snapshot: trailing bytes after state");
    }
    return state;
}

}  // namespace adapprox
