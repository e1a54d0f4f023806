#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "data.hpp"
#include "error.hpp"
#include "random.hpp"

namespace adruwams {

// ---------------------------------------------------------------------------
// Case composition and stratification

struct CaseStats {
    std::string case_id;
    std::int64_t net = 0, ed = 0, et = 0; ///< voxel counts of labels 1, 2, 4
    std::int64_t size() const { return net + ed + et; }
};

inline CaseStats case_stats(std::string case_id, const LabelVolume& labels) {
    CaseStats s{std::move(case_id)};
    for (std::uint8_t v : labels.values()) {
        switch (v) {
        case 0: break;
        case 1: ++s.net; break;
        case 2: ++s.ed; break;
        case 4: ++s.et; break;
        default: fail(Errc::validation, "case " + s.case_id + ": unexpected label " + std::to_string(v));
        }
    }
    return s;
}

inline CaseStats case_stats(const Case& c) { return case_stats(c.case_id, c.labels); }

inline constexpr std::array<const char*, 3> subtype_names{"NET", "ED", "ET"};

/// Linear-interpolation quantile of an already sorted sample, q in [0,1].
inline double quantile_sorted(std::span<const double> sorted, double q) {
    require(!sorted.empty(), "quantile of an empty sample");
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    if (lo + 1 >= sorted.size()) return sorted.back();
    return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[lo + 1] - sorted[lo]);
}

/// Dominant subtype index (0 NET, 1 ED, 2 ET); ties go to the earlier one.
inline std::size_t dominant_subtype(const CaseStats& s) {
    const std::array<std::int64_t, 3> c{s.net, s.ed, s.et};
    std::size_t best = 0;
    for (std::size_t i = 1; i < 3; ++i)
        if (c[i] > c[best]) best = i;
    return best;
}

/// Stratum label "T<tertile>-<subtype>" for each case, in input order.
inline std::vector<std::string> stratify(const std::vector<CaseStats>& cases) {
    std::vector<double> sizes;
    for (const auto& c : cases) sizes.push_back(static_cast<double>(c.size()));
    std::sort(sizes.begin(), sizes.end());
    std::vector<std::string> out;
    if (cases.empty()) return out;
    const double q1 = quantile_sorted(sizes, 1.0 / 3.0), q2 = quantile_sorted(sizes, 2.0 / 3.0);
    for (const auto& c : cases) {
        const double s = static_cast<double>(c.size());
        const int tertile = s <= q1 ? 0 : s <= q2 ? 1 : 2;
        out.push_back("T" + std::to_string(tertile) + "-" + subtype_names[dominant_subtype(c)]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Stratified 5-fold split over 10 rotating chunks

struct FoldSplit {
    std::vector<std::string> train, val, test;
    friend bool operator==(const FoldSplit&, const FoldSplit&) = default;
};

struct FoldAssignment {
    std::uint64_t seed = 0;
    std::map<std::string, std::string> strata; ///< case id -> stratum label
    std::vector<FoldSplit> folds;
    friend bool operator==(const FoldAssignment&, const FoldAssignment&) = default;
};

inline constexpr std::size_t fold_count = 5;
inline constexpr std::size_t chunk_count = 2 * fold_count;

/// Cases of each stratum (labels in sorted order) are shuffled and dealt into
/// chunks in the order 0,2,4,6,8,1,3,5,7,9, the position carrying over between
/// strata. Consecutive positions then alternate between val-type and
/// test-type chunks, which keeps every stratum's train/val/test share within
/// one case of proportional.
inline FoldAssignment kfold_split(const std::map<std::string, std::string>& strata, std::uint64_t seed) {
    if (strata.size() < chunk_count)
        fail(Errc::validation, "kfold_split: need at least " + std::to_string(chunk_count) + " cases, got " +
                                   std::to_string(strata.size()));
    std::map<std::string, std::vector<std::string>> groups;
    for (const auto& [id, label] : strata) {
        require(!label.empty(), "kfold_split: empty stratum label for case " + id);
        groups[label].push_back(id); // map iteration keeps ids sorted
    }
    static constexpr std::array<std::size_t, chunk_count> deal{0, 2, 4, 6, 8, 1, 3, 5, 7, 9};
    std::array<std::vector<std::string>, chunk_count> chunks;
    Rng rng(seed);
    std::size_t pos = 0;
    for (auto& [label, ids] : groups) {
        rng.shuffle(ids);
        for (const auto& id : ids) chunks[deal[pos++ % chunk_count]].push_back(id);
    }
    FoldAssignment fa{seed, strata, {}};
    for (std::size_t f = 0; f < fold_count; ++f) {
        FoldSplit s;
        for (std::size_t c = 0; c < chunk_count; ++c) {
            auto& dst = c == 2 * f ? s.val : c == 2 * f + 1 ? s.test : s.train;
            dst.insert(dst.end(), chunks[c].begin(), chunks[c].end());
        }
        std::sort(s.train.begin(), s.train.end());
        std::sort(s.val.begin(), s.val.end());
        std::sort(s.test.begin(), s.test.end());
        fa.folds.push_back(std::move(s));
    }
    return fa;
}

inline FoldAssignment kfold_split(const std::vector<CaseStats>& cases, std::uint64_t seed) {
    const auto labels = stratify(cases);
    std::map<std::string, std::string> strata;
    for (std::size_t i = 0; i < cases.size(); ++i) {
        require(strata.emplace(cases[i].case_id, labels[i]).second, "kfold_split: duplicate case id " + cases[i].case_id);
    }
    return kfold_split(strata, seed);
}

// ---------------------------------------------------------------------------
// Student t distribution

/// Regularized incomplete beta I_x(a, b), continued fraction (modified Lentz).
inline double incomplete_beta(double a, double b, double x) {
    require(a > 0 && b > 0, "incomplete_beta: a and b must be positive", Errc::numeric);
    require(x >= 0 && x <= 1, "incomplete_beta: x must lie in [0, 1]", Errc::numeric);
    if (x == 0 || x == 1) return x;
    if (x > (a + 1) / (a + b + 2)) return 1.0 - incomplete_beta(b, a, 1.0 - x);
    const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
    constexpr double tiny = 1e-300, eps = 1e-16;
    double f = 1, c = 1, d = 0;
    for (int i = 0; i <= 400; ++i) {
        const int m = i / 2;
        double num;
        if (i == 0) num = 1;
        else if (i % 2 == 0) num = m * (b - m) * x / ((a + 2.0 * m - 1) * (a + 2.0 * m));
        else num = -(a + m) * (a + b + m) * x / ((a + 2.0 * m) * (a + 2.0 * m + 1));
        d = 1 + num * d;
        if (std::fabs(d) < tiny) d = tiny;
        d = 1 / d;
        c = 1 + num / c;
        if (std::fabs(c) < tiny) c = tiny;
        const double cd = c * d;
        f *= cd;
        if (std::fabs(1 - cd) < eps) return std::exp(ln_front) * (f - 1) / a;
    }
    fail(Errc::numeric, "incomplete_beta: continued fraction did not converge");
}

/// Two-tailed p-value P(|T| >= |t|) for Student's t with `df` degrees of freedom.
inline double student_t_two_tailed(double t, double df) {
    require(df > 0 && std::isfinite(t), "student_t_two_tailed: need finite t and df > 0", Errc::numeric);
    return incomplete_beta(df / 2, 0.5, df / (df + t * t));
}

// ---------------------------------------------------------------------------
// Paired comparison

struct TTestResult {
    std::size_t n = 0;
    double mean_diff = 0, sd_diff = 0, t = 0, p = 1, cohens_d = 0;
};

inline TTestResult paired_t_test(std::span<const double> a, std::span<const double> b) {
    require(a.size() == b.size(), "paired_t_test: length mismatch " + std::to_string(a.size()) + " vs " +
                                      std::to_string(b.size()));
    require(a.size() >= 2, "paired_t_test: need at least 2 pairs");
    const std::size_t n = a.size();
    std::vector<double> d(n);
    double mean = 0, scale = 0;
    for (std::size_t i = 0; i < n; ++i) {
        d[i] = a[i] - b[i];
        require(std::isfinite(d[i]), "paired_t_test: non-finite value", Errc::numeric);
        mean += d[i];
        scale = std::max({scale, std::fabs(a[i]), std::fabs(b[i])});
    }
    mean /= static_cast<double>(n);
    double ss = 0;
    for (double x : d) ss += (x - mean) * (x - mean);
    const double sd = std::sqrt(ss / static_cast<double>(n - 1));
    // Differences that are constant up to rounding of the inputs count as degenerate.
    if (sd <= 64 * std::numeric_limits<double>::epsilon() * std::max(scale, std::fabs(mean)))
        fail(Errc::numeric, "degenerate: zero variance");
    TTestResult r;
    r.n = n;
    r.mean_diff = mean;
    r.sd_diff = sd;
    r.t = mean / (sd / std::sqrt(static_cast<double>(n)));
    r.p = student_t_two_tailed(r.t, static_cast<double>(n - 1));
    r.cohens_d = mean / sd;
    return r;
}

enum class EffectSize { small, medium, large };

inline const char* effect_size_name(EffectSize e) {
    switch (e) {
    case EffectSize::small: return "small";
    case EffectSize::medium: return "medium";
    case EffectSize::large: return "large";
    }
    return "unknown";
}

inline EffectSize cohens_d_interpret(double d) {
    require(std::isfinite(d), "cohens_d_interpret: non-finite d", Errc::numeric);
    const double m = std::fabs(d);
    return m < 0.35 ? EffectSize::small : m < 0.65 ? EffectSize::medium : EffectSize::large;
}

/// Product-moment correlation, single pass (Welford co-moments).
inline double pearson_corr(std::span<const double> x, std::span<const double> y) {
    require(x.size() == y.size(), "pearson_corr: length mismatch");
    require(x.size() >= 2, "pearson_corr: need at least 2 points");
    double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double k = static_cast<double>(i + 1);
        const double dx = x[i] - mx, dy = y[i] - my;
        mx += dx / k;
        my += dy / k;
        sxx += dx * (x[i] - mx);
        syy += dy * (y[i] - my);
        sxy += dx * (y[i] - my);
    }
    if (!(sxx > 0) || !(syy > 0)) fail(Errc::numeric, "pearson_corr: degenerate: zero variance");
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

// ---------------------------------------------------------------------------
// Fold tables (one row per fold, one column per metric/class)

inline const std::vector<std::string>& fold_table_columns() {
    static const std::vector<std::string> cols{"fold",   "dice_wt", "dice_tc", "dice_et", "hd_wt",   "hd_tc",  "hd_et",
                                               "sens_wt", "sens_tc", "sens_et", "spec_wt", "spec_tc", "spec_et"};
    return cols;
}

struct FoldTable {
    std::vector<std::string> columns;   ///< metric columns (without "fold")
    std::map<int, std::vector<double>> rows; ///< fold -> values in column order
};

namespace detail {
inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) {
        const auto b = cell.find_first_not_of(" \t\r"), e = cell.find_last_not_of(" \t\r");
        out.push_back(b == std::string::npos ? "" : cell.substr(b, e - b + 1));
    }
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

inline double parse_number(const std::string& s, const std::string& where) {
    std::size_t used = 0;
    double v = 0;
    try {
        v = std::stod(s, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used == 0 || used != s.size()) fail(Errc::io, where + ": not a number: '" + s + "'");
    return v;
}
} // namespace detail

inline FoldTable parse_fold_table(std::istream& in, const std::string& name = "<csv>") {
    std::string line;
    std::size_t lineno = 0;
    FoldTable t;
    std::vector<std::string> header;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        auto cells = detail::split_csv_line(line);
        if (header.empty()) {
            header = cells;
            if (header.empty() || header[0] != "fold") fail(Errc::io, name + ": first column must be 'fold'");
            t.columns.assign(header.begin() + 1, header.end());
            for (std::size_t i = 0; i < t.columns.size(); ++i)
                for (std::size_t j = 0; j < i; ++j)
                    if (t.columns[i] == t.columns[j]) fail(Errc::io, name + ": duplicate column " + t.columns[i]);
            continue;
        }
        const std::string where = name + ":" + std::to_string(lineno);
        if (cells.size() != header.size())
            fail(Errc::io, where + ": expected " + std::to_string(header.size()) + " fields, got " +
                               std::to_string(cells.size()));
        const double fold = detail::parse_number(cells[0], where);
        if (fold != std::floor(fold)) fail(Errc::io, where + ": fold must be an integer");
        std::vector<double> vals;
        for (std::size_t i = 1; i < cells.size(); ++i) vals.push_back(detail::parse_number(cells[i], where));
        if (!t.rows.emplace(static_cast<int>(fold), std::move(vals)).second)
            fail(Errc::io, where + ": duplicate fold " + cells[0]);
    }
    if (header.empty()) fail(Errc::io, name + ": empty table");
    return t;
}

inline FoldTable read_fold_table(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(Errc::io, "cannot open " + path.string());
    return parse_fold_table(in, path.string());
}

struct Comparison {
    std::string metric; ///< e.g. "dice"
    std::string cls;    ///< e.g. "wt"
    TTestResult result;
    EffectSize effect = EffectSize::small;
};

/// Paired tests for every column present in both tables, rows paired by fold.
/// Column "x_y" is reported as metric x, class y.
inline std::vector<Comparison> compare_fold_tables(const FoldTable& a, const FoldTable& b) {
    require(a.rows.size() == b.rows.size(), "fold tables have different fold counts");
    for (const auto& [fold, _] : a.rows)
        require(b.rows.count(fold) == 1, "fold " + std::to_string(fold) + " missing from second table");
    std::vector<Comparison> out;
    for (std::size_t i = 0; i < a.columns.size(); ++i) {
        const auto it = std::find(b.columns.begin(), b.columns.end(), a.columns[i]);
        if (it == b.columns.end()) continue;
        const std::size_t j = static_cast<std::size_t>(it - b.columns.begin());
        std::vector<double> xa, xb;
        for (const auto& [fold, row] : a.rows) {
            xa.push_back(row[i]);
            xb.push_back(b.rows.at(fold)[j]);
        }
        const auto& col = a.columns[i];
        const auto us = col.rfind('_');
        Comparison c;
        c.metric = us == std::string::npos ? col : col.substr(0, us);
        c.cls = us == std::string::npos ? "" : col.substr(us + 1);
        try {
            c.result = paired_t_test(xa, xb);
        } catch (const Error& e) {
            fail(e.code(), col + ": " + e.what());
        }
        c.effect = cohens_d_interpret(c.result.cohens_d);
        out.push_back(std::move(c));
    }
    require(!out.empty(), "fold tables share no metric columns");
    return out;
}

} // namespace adruwams
