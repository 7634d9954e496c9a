// Domain types shared by every module: expression codes, face group labels,
// dataset records and the identity-level split.
//
// FaceRecord's identity_id and expression_tag sit behind a firewall: while a
// TagFirewall::Guard is alive (the trainer holds one around every update
// step), reading either field throws. Training therefore provably consumes
// only images and the binary group label.
#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "ecgan/common.hpp"
#include "ecgan/image.hpp"
#include "ecgan/rng.hpp"

namespace ecgan {

struct ExpressionCode {
    std::vector<float> values;

    ExpressionCode() = default;
    explicit ExpressionCode(std::vector<float> v) : values(std::move(v)) {}

    int dim() const { return static_cast<int>(values.size()); }

    bool is_zero() const {
        return std::all_of(values.begin(), values.end(), [](float v) { return v == 0.0f; });
    }

    float norm() const {
        double acc = 0.0;
        for (float v : values) acc += static_cast<double>(v) * v;
        return static_cast<float>(std::sqrt(acc));
    }
};

enum class FaceGroupLabel : int { kNeutral = 0, kEmotional = 1 };

inline const char* to_string(FaceGroupLabel g) {
    return g == FaceGroupLabel::kNeutral ? "neutral" : "emotional";
}

// ---- label firewall ---------------------------------------------------------

class TagFirewall {
public:
    // RAII scope marking "training path": metadata reads are forbidden inside.
    class Guard {
    public:
        Guard() { ++depth(); }
        ~Guard() { --depth(); }
        Guard(const Guard&) = delete;
        Guard& operator=(const Guard&) = delete;
    };

    static bool active() { return depth() > 0; }

    static void assert_readable(const char* field) {
        if (active())
            throw std::logic_error(std::string("firewall: training-path code read FaceRecord::") +
                                   field);
    }

private:
    static int& depth() {
        thread_local int d = 0;
        return d;
    }
};

struct FaceRecord {
    FaceImage image;
    FaceGroupLabel group = FaceGroupLabel::kNeutral;

    FaceRecord() = default;
    FaceRecord(FaceImage img, FaceGroupLabel g, std::string identity, std::string tag)
        : image(std::move(img)), group(g), identity_id_(std::move(identity)),
          expression_tag_(std::move(tag)) {
        if (identity_id_.empty()) throw invalid_argument("FaceRecord identity_id must be non-empty");
        const bool tag_neutral = expression_tag_ == "neutral";
        if (tag_neutral != (group == FaceGroupLabel::kNeutral))
            throw invalid_argument("FaceRecord: expression_tag 'neutral' iff group NEUTRAL (got tag '" +
                                   expression_tag_ + "')");
    }

    // Evaluation-only metadata; throws inside a TagFirewall::Guard.
    const std::string& identity_id() const {
        TagFirewall::assert_readable("identity_id");
        return identity_id_;
    }
    const std::string& expression_tag() const {
        TagFirewall::assert_readable("expression_tag");
        return expression_tag_;
    }

private:
    std::string identity_id_;
    std::string expression_tag_;
};

struct DatasetSplit {
    std::set<std::string> train_identities;
    std::set<std::string> test_identities;
};

// ---- operations -------------------------------------------------------------

enum class CodeDist { kUniform, kGaussian };

// Gaussian sigma chosen so the ablation variant has spread comparable to
// U(-0.5, 0.5); recorded in run configs.
inline constexpr double kGaussianCodeSigma = 0.25;

inline ExpressionCode sample_expression_code(Rng& rng, int d, CodeDist dist) {
    if (d <= 0) throw invalid_argument("expression code dimension must be >= 1");
    std::vector<float> v(static_cast<size_t>(d));
    if (dist == CodeDist::kUniform) {
        for (auto& x : v) x = static_cast<float>(rng.uniform(-0.5, 0.5));
    } else {
        for (auto& x : v) x = static_cast<float>(kGaussianCodeSigma * rng.normal());
    }
    return ExpressionCode(std::move(v));
}

inline ExpressionCode neutral_code(int d) {
    if (d <= 0) throw invalid_argument("expression code dimension must be >= 1");
    return ExpressionCode(std::vector<float>(static_cast<size_t>(d), 0.0f));
}

// Partitions identities into train/test, drawing test identities uniformly
// without replacement. Every identity must appear in both face groups.
inline DatasetSplit split_by_identity(const std::vector<FaceRecord>& records, int test_count,
                                      Rng& rng) {
    std::map<std::string, std::pair<bool, bool>> groups;  // identity -> (has neutral, has emotional)
    for (const auto& r : records) {
        auto& g = groups[r.identity_id()];
        if (r.group == FaceGroupLabel::kNeutral)
            g.first = true;
        else
            g.second = true;
    }
    std::vector<std::string> bad;
    for (const auto& [id, g] : groups)
        if (!g.first || !g.second) bad.push_back(id);
    if (!bad.empty()) {
        std::string msg = "identities missing one face group:";
        for (const auto& id : bad) msg += " " + id;
        throw dataset_error(msg);
    }
    const int n = static_cast<int>(groups.size());
    if (test_count < 0 || test_count >= n)
        throw invalid_argument("test_count must be in [0, #identities)");

    std::vector<std::string> ids;
    ids.reserve(groups.size());
    for (const auto& [id, g] : groups) ids.push_back(id);
    // partial Fisher-Yates: the first test_count entries become the test set
    for (int i = 0; i < test_count; ++i) {
        const int j = i + static_cast<int>(rng.below(static_cast<uint64_t>(n - i)));
        std::swap(ids[static_cast<size_t>(i)], ids[static_cast<size_t>(j)]);
    }
    DatasetSplit split;
    for (int i = 0; i < n; ++i)
        (i < test_count ? split.test_identities : split.train_identities)
            .insert(ids[static_cast<size_t>(i)]);
    return split;
}

}  // namespace ecgan
