#pragma once

// Binary checkpoint: "RAIRLCKP", u32 LE format version, u64 LE metadata
// length, UTF-8 JSON metadata (config echo, iteration, block table, RNG and
// Adam scalars), then the raw little-endian float64 blocks in table order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "rairl/error.hpp"
#include "rairl/numerics.hpp"
#include "rairl/training.hpp"

namespace rairl {

inline constexpr char checkpoint_magic[8] = {'R', 'A', 'I', 'R', 'L', 'C', 'K', 'P'};
inline constexpr std::uint32_t checkpoint_version = 1;

struct Checkpoint {
    nlohmann::json config;  // echo of the configuration that produced the run
    TrainerState state;

    friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

namespace detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename U>
void put_le(std::ostream& os, U v) {
    unsigned char b[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        b[i] = static_cast<unsigned char>(v >> (8 * i));
    }
    os.write(reinterpret_cast<const char*>(b), sizeof(U));
}

template <typename U>
U get_le(std::istream& is, const char* what) {
    unsigned char b[sizeof(U)];
    if (!is.read(reinterpret_cast<char*>(b), sizeof(U))) {
        throw FormatError(std::string("checkpoint truncated in ") + what);
    }
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        v |= static_cast<U>(b[i]) << (8 * i);
    }
    return v;
}

struct CheckpointBlock {
    std::string name;
    std::size_t rows = 0;
    std::size_t cols = 0;
    const double* data = nullptr;
};

inline DenseMatrix vector_block(const Vector& v) { return DenseMatrix(1, v.size(), v); }

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
    const auto& s = ck.state;
    // Adam moments are flat vectors; store them as 1 x n blocks.
    const DenseMatrix pm = detail::vector_block(s.policy_adam.first_moment);
    const DenseMatrix pv = detail::vector_block(s.policy_adam.second_moment);
    const DenseMatrix dm = detail::vector_block(s.disc_adam.first_moment);
    const DenseMatrix dv = detail::vector_block(s.disc_adam.second_moment);
    std::vector<detail::CheckpointBlock> blocks;
    for (const ParameterSet* p : {&s.policy, &s.disc}) {
        for (std::size_t i = 0; i < p->block_count(); ++i) {
            const auto& m = (*p)[i];
            blocks.push_back({p->name(i), m.rows(), m.cols(), m.data().data()});
        }
    }
    blocks.push_back({"adam.policy.m", 1, pm.cols(), pm.data().data()});
    blocks.push_back({"adam.policy.v", 1, pv.cols(), pv.data().data()});
    blocks.push_back({"adam.disc.m", 1, dm.cols(), dm.data().data()});
    blocks.push_back({"adam.disc.v", 1, dv.cols(), dv.data().data()});

    nlohmann::json table = nlohmann::json::array();
    std::size_t offset = 0;
    for (const auto& b : blocks) {
        table.push_back({{"name", b.name}, {"rows", b.rows}, {"cols", b.cols}, {"offset", offset}});
        offset += 8 * b.rows * b.cols;
    }
    const auto adam_json = [](const AdamState& a) {
        return nlohmann::json{{"step", a.step},
                              {"beta1", a.beta1},
                              {"beta2", a.beta2},
                              {"epsilon", a.epsilon},
                              {"learning_rate", a.learning_rate}};
    };
    const nlohmann::json meta{{"config", ck.config},
                              {"iteration", s.iteration},
                              {"rng", s.rng_state},
                              {"adam", {{"policy", adam_json(s.policy_adam)}, {"disc", adam_json(s.disc_adam)}}},
                              {"blocks", table}};
    const std::string text = meta.dump();
    os.write(checkpoint_magic, sizeof checkpoint_magic);
    detail::put_le<std::uint32_t>(os, checkpoint_version);
    detail::put_le<std::uint64_t>(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& b : blocks) {
        for (std::size_t i = 0; i < b.rows * b.cols; ++i) {
            detail::put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(b.data[i]));
        }
    }
    if (!os) {
        throw InvalidInput("checkpoint: write failed");
    }
}

inline Checkpoint read_checkpoint(std::istream& is) {
    char magic[8];
    if (!is.read(magic, sizeof magic)) {
        throw FormatError("checkpoint truncated in header");
    }
    if (std::memcmp(magic, checkpoint_magic, sizeof magic) != 0) {
        throw FormatError("not a checkpoint file (bad magic)");
    }
    const auto version = detail::get_le<std::uint32_t>(is, "header");
    if (version != checkpoint_version) {
        throw VersionError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                           std::to_string(checkpoint_version) + ")");
    }
    const auto len = detail::get_le<std::uint64_t>(is, "header");
    if (len > (std::uint64_t{1} << 32)) {
        throw FormatError("checkpoint metadata length is implausible");
    }
    std::string text(len, '\0');
    if (!is.read(text.data(), static_cast<std::streamsize>(len))) {
        throw FormatError("checkpoint truncated in metadata");
    }
    Checkpoint ck;
    auto& s = ck.state;
    try {
        const auto meta = nlohmann::json::parse(text);
        ck.config = meta.at("config");
        s.iteration = meta.at("iteration").get<std::size_t>();
        s.rng_state = meta.at("rng").get<std::string>();
        const auto adam = [](const nlohmann::json& j) {
            AdamState a;
            a.step = j.at("step").get<std::size_t>();
            a.beta1 = j.at("beta1").get<double>();
            a.beta2 = j.at("beta2").get<double>();
            a.epsilon = j.at("epsilon").get<double>();
            a.learning_rate = j.at("learning_rate").get<double>();
            return a;
        };
        s.policy_adam = adam(meta.at("adam").at("policy"));
        s.disc_adam = adam(meta.at("adam").at("disc"));
        std::size_t expected_offset = 0;
        for (const auto& b : meta.at("blocks")) {
            const auto name = b.at("name").get<std::string>();
            const auto rows = b.at("rows").get<std::size_t>();
            const auto cols = b.at("cols").get<std::size_t>();
            if (b.at("offset").get<std::size_t>() != expected_offset) {
                throw FormatError("checkpoint block '" + name + "' has an inconsistent offset");
            }
            if (rows > (1u << 24) || cols > (1u << 24)) {
                throw FormatError("checkpoint block '" + name + "' has an implausible shape");
            }
            expected_offset += 8 * rows * cols;
            Vector data(rows * cols);
            for (double& x : data) {
                x = std::bit_cast<double>(detail::get_le<std::uint64_t>(is, "block data"));
            }
            if (name.starts_with("policy.")) {
                s.policy.add(name, DenseMatrix(rows, cols, std::move(data)));
            } else if (name.starts_with("disc.")) {
                s.disc.add(name, DenseMatrix(rows, cols, std::move(data)));
            } else if (name == "adam.policy.m") {
                s.policy_adam.first_moment = std::move(data);
            } else if (name == "adam.policy.v") {
                s.policy_adam.second_moment = std::move(data);
            } else if (name == "adam.disc.m") {
                s.disc_adam.first_moment = std::move(data);
            } else if (name == "adam.disc.v") {
                s.disc_adam.second_moment = std::move(data);
            } else {
                throw FormatError("checkpoint has unknown block '" + name + "'");
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint metadata: ") + e.what());
    } catch (const InvalidInput& e) {
        throw FormatError(std::string("checkpoint: ") + e.what());
    }
    if (is.peek() != std::char_traits<char>::eof()) {
        throw FormatError("checkpoint has trailing bytes");
    }
    if (s.policy_adam.first_moment.size() != s.policy.total_dim() ||
        s.policy_adam.second_moment.size() != s.policy.total_dim() ||
        s.disc_adam.first_moment.size() != s.disc.total_dim() ||
        s.disc_adam.second_moment.size() != s.disc.total_dim()) {
        throw FormatError("checkpoint optimizer state does not match the parameter blocks");
    }
    return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) {
        throw InvalidInput("cannot open '" + path + "' for writing");
    }
    write_checkpoint(os, ck);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw InvalidInput("cannot open checkpoint '" + path + "'");
    }
    return read_checkpoint(is);
}

}  // namespace rairl
