#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace etchvm {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

/// Number of metrology sites per wafer.
inline constexpr int kProfilePoints = 89;

enum class ErrorCode {
    MissingFile,
    MalformedRow,
    NonFiniteValue,
    ProfileCountMismatch,
    EmptyDataset,
    TooFewLots,
    InconsistentChannels,
    GridMismatch,
    NoActivePhase,
    PhaseTooShort,
    SeriesTooShort,
    ShapeMismatch,
    ChannelCountMismatch,
    NonFiniteGradient,
    DivergedLoss,
    LengthMismatch,
    EmptyTrainSet,
    InvalidArgument,
    InvalidConfig,
    IoError,
};

std::string_view to_string(ErrorCode code);

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

/// FNV-1a over raw bytes; used for parameter and file checksums.
class Fnv1a {
public:
    void update(const void* data, std::size_t size) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < size; ++i) {
            hash_ ^= p[i];
            hash_ *= 0x100000001b3ULL;
        }
    }
    void update(const Matrix& m) { update(m.data(), sizeof(double) * static_cast<std::size_t>(m.size())); }
    void update(std::string_view s) { update(s.data(), s.size()); }
    std::uint64_t digest() const { return hash_; }

private:
    std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

std::string hex64(std::uint64_t v);

inline Matrix random_normal(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
    return m;
}

}  // namespace etchvm
