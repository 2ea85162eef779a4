#include "mrad/eval_metrics.hpp"

#include "mrad/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mrad::eval {

namespace {

void check_inputs(std::span<const double> scores, std::span<const std::uint8_t> labels)
{
    if (scores.size() != labels.size())
        throw_validation("score and label counts differ");
    for (double s : scores)
        if (std::isnan(s))
            throw_validation("NaN score");
}

using MapPairs = std::vector<std::pair<const AnomalyMap*, const Bitmap*>>;

MapPairs pair_up(const std::vector<AnomalyMap>& maps, const std::vector<Bitmap>& masks)
{
    if (maps.size() != masks.size())
        throw_validation("map and mask counts differ");
    MapPairs pairs;
    for (std::size_t i = 0; i < maps.size(); ++i)
        pairs.emplace_back(&maps[i], &masks[i]);
    return pairs;
}

void check_pairs(const MapPairs& pairs)
{
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const auto& [map, mask] = pairs[i];
        if (map->height != mask->height || map->width != mask->width || map->scores.size() != mask->pixels.size())
            throw_validation("map " + std::to_string(i) + " and its mask differ in size");
    }
}

double pixel_auroc_impl(const MapPairs& pairs)
{
    check_pairs(pairs);
    std::vector<double> scores;
    std::vector<std::uint8_t> labels;
    for (const auto& [map, mask] : pairs) {
        scores.insert(scores.end(), map->scores.begin(), map->scores.end());
        for (auto p : mask->pixels)
            labels.push_back(p != 0);
    }
    return auroc(scores, labels);
}

double pro_impl(const MapPairs& pairs, double fpr_cap, std::size_t thresholds);

// Number of elements of an ascending vector that are >= t.
std::size_t count_at_least(const std::vector<double>& ascending, double t)
{
    return static_cast<std::size_t>(ascending.end() - std::lower_bound(ascending.begin(), ascending.end(), t));
}

std::optional<double> mean_of(const std::vector<double>& v)
{
    if (v.empty())
        return std::nullopt;
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

} // namespace

double auroc(std::span<const double> scores, std::span<const std::uint8_t> labels)
{
    check_inputs(scores, labels);
    const std::size_t n = scores.size();
    std::size_t n_pos = 0;
    for (auto l : labels)
        n_pos += l != 0;
    const std::size_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0)
        throw_validation("AUROC is undefined with a single class");

    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    double pos_rank_sum = 0.0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        std::size_t pos_in_group = 0;
        while (j < n && scores[idx[j]] == scores[idx[i]]) {
            pos_in_group += labels[idx[j]] != 0;
            ++j;
        }
        // Ranks i+1 .. j share their average.
        const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
        pos_rank_sum += avg_rank * static_cast<double>(pos_in_group);
        i = j;
    }
    const double np = static_cast<double>(n_pos);
    return (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * static_cast<double>(n_neg));
}

double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels)
{
    check_inputs(scores, labels);
    const std::size_t n = scores.size();
    std::size_t n_pos = 0;
    for (auto l : labels)
        n_pos += l != 0;
    if (n_pos == 0)
        throw_validation("average precision is undefined without positives");

    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    double ap = 0.0;
    std::size_t tp = 0, seen = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        std::size_t pos_in_group = 0;
        while (j < n && scores[idx[j]] == scores[idx[i]]) {
            pos_in_group += labels[idx[j]] != 0;
            ++j;
        }
        tp += pos_in_group;
        seen = j;
        if (pos_in_group > 0)
            ap += static_cast<double>(pos_in_group) / static_cast<double>(n_pos) * static_cast<double>(tp)
                  / static_cast<double>(seen);
        i = j;
    }
    return ap;
}

double pixel_auroc(const std::vector<AnomalyMap>& maps, const std::vector<Bitmap>& masks)
{
    return pixel_auroc_impl(pair_up(maps, masks));
}

std::vector<std::vector<std::size_t>> connected_regions(const Bitmap& mask)
{
    const std::size_t h = mask.height, w = mask.width;
    std::vector<std::uint8_t> seen(h * w, 0);
    std::vector<std::vector<std::size_t>> regions;
    std::vector<std::size_t> stack;
    for (std::size_t start = 0; start < h * w; ++start) {
        if (!mask.pixels[start] || seen[start])
            continue;
        std::vector<std::size_t> region;
        seen[start] = 1;
        stack.push_back(start);
        while (!stack.empty()) {
            const std::size_t p = stack.back();
            stack.pop_back();
            region.push_back(p);
            const std::size_t r = p / w, c = p % w;
            for (int dr = -1; dr <= 1; ++dr)
                for (int dc = -1; dc <= 1; ++dc) {
                    if (dr == 0 && dc == 0)
                        continue;
                    const auto rr = static_cast<std::ptrdiff_t>(r) + dr;
                    const auto cc = static_cast<std::ptrdiff_t>(c) + dc;
                    if (rr < 0 || cc < 0 || rr >= static_cast<std::ptrdiff_t>(h) || cc >= static_cast<std::ptrdiff_t>(w))
                        continue;
                    const std::size_t q = static_cast<std::size_t>(rr) * w + static_cast<std::size_t>(cc);
                    if (mask.pixels[q] && !seen[q]) {
                        seen[q] = 1;
                        stack.push_back(q);
                    }
                }
        }
        std::sort(region.begin(), region.end());
        regions.push_back(std::move(region));
    }
    return regions;
}

double integrate_pro_curve(const std::vector<std::pair<double, double>>& curve, double fpr_cap)
{
    if (curve.empty())
        throw_validation("empty PRO curve");
    double area = 0.0;
    double x_prev = 0.0, y_prev = curve.front().second;
    for (const auto& [x, y] : curve) {
        if (x >= fpr_cap) {
            const double y_cap = x > x_prev ? y_prev + (y - y_prev) * (fpr_cap - x_prev) / (x - x_prev) : y;
            area += (fpr_cap - x_prev) * (y_prev + y_cap) / 2.0;
            return area / fpr_cap;
        }
        area += (x - x_prev) * (y_prev + y) / 2.0;
        x_prev = x;
        y_prev = y;
    }
    area += (fpr_cap - x_prev) * y_prev;
    return area / fpr_cap;
}

double pro(const std::vector<AnomalyMap>& maps, const std::vector<Bitmap>& masks, double fpr_cap,
           std::size_t thresholds)
{
    return pro_impl(pair_up(maps, masks), fpr_cap, thresholds);
}

namespace {

double pro_impl(const MapPairs& pairs, double fpr_cap, std::size_t thresholds)
{
    if (!(fpr_cap > 0.0 && fpr_cap <= 1.0))
        throw_validation("PRO FPR cap must lie in (0, 1]");
    if (thresholds < 1)
        throw_validation("PRO needs at least one threshold");
    check_pairs(pairs);

    std::vector<double> all, normal;
    std::vector<std::vector<double>> regions;
    for (const auto& [map, mask] : pairs) {
        const auto& s = map->scores;
        all.insert(all.end(), s.begin(), s.end());
        for (std::size_t p = 0; p < s.size(); ++p)
            if (!mask->pixels[p])
                normal.push_back(s[p]);
        for (const auto& region : connected_regions(*mask)) {
            std::vector<double> rs;
            rs.reserve(region.size());
            for (std::size_t p : region)
                rs.push_back(s[p]);
            std::sort(rs.begin(), rs.end());
            regions.push_back(std::move(rs));
        }
    }
    if (regions.empty())
        throw_validation("PRO is undefined without ground-truth regions");
    if (normal.empty())
        throw_validation("PRO is undefined without normal pixels");
    std::sort(all.begin(), all.end());
    std::sort(normal.begin(), normal.end());

    std::vector<double> levels;
    const std::size_t n = all.size();
    for (std::size_t i = 0; i < thresholds; ++i) {
        const double level = thresholds == 1 ? 1.0 : 1.0 - static_cast<double>(i) / static_cast<double>(thresholds - 1);
        const auto idx = static_cast<std::size_t>(std::llround(level * static_cast<double>(n - 1)));
        const double t = all[idx];
        if (levels.empty() || t < levels.back())
            levels.push_back(t);
    }

    std::vector<std::pair<double, double>> curve;
    curve.reserve(levels.size());
    for (double t : levels) {
        const double fpr = static_cast<double>(count_at_least(normal, t)) / static_cast<double>(normal.size());
        double overlap = 0.0;
        for (const auto& rs : regions)
            overlap += static_cast<double>(count_at_least(rs, t)) / static_cast<double>(rs.size());
        curve.emplace_back(fpr, overlap / static_cast<double>(regions.size()));
    }
    return integrate_pro_curve(curve, fpr_cap);
}

} // namespace

EvalReport evaluate(const std::vector<EvalItem>& items, double fpr_cap, std::size_t thresholds)
{
    std::map<std::string, std::vector<const EvalItem*>> groups;
    for (const auto& item : items)
        groups[item.category].push_back(&item);

    EvalReport report;
    std::vector<double> i_auroc, i_ap, p_auroc, p_pro;
    for (const auto& [category, members] : groups) {
        CategoryMetrics m;
        std::vector<double> scores;
        std::vector<std::uint8_t> labels;
        MapPairs pairs;
        for (const EvalItem* it : members) {
            scores.push_back(it->score);
            labels.push_back(it->label);
            m.anomalous_images += it->label != 0;
            if (it->map && it->mask)
                pairs.emplace_back(it->map, it->mask);
        }
        m.images = members.size();
        m.pixel_images = pairs.size();
        if (m.anomalous_images > 0 && m.anomalous_images < m.images)
            m.image_auroc = auroc(scores, labels);
        if (m.anomalous_images > 0)
            m.image_ap = average_precision(scores, labels);

        bool any_pos = false, any_neg = false;
        for (const auto& pair : pairs)
            for (auto p : pair.second->pixels)
                (p ? any_pos : any_neg) = true;
        if (any_pos && any_neg) {
            m.pixel_auroc = pixel_auroc_impl(pairs);
            m.pro = pro_impl(pairs, fpr_cap, thresholds);
        }

        if (m.image_auroc) i_auroc.push_back(*m.image_auroc);
        if (m.image_ap) i_ap.push_back(*m.image_ap);
        if (m.pixel_auroc) p_auroc.push_back(*m.pixel_auroc);
        if (m.pro) p_pro.push_back(*m.pro);
        report.average.images += m.images;
        report.average.anomalous_images += m.anomalous_images;
        report.average.pixel_images += m.pixel_images;
        report.per_category.emplace(category, m);
    }
    report.average.image_auroc = mean_of(i_auroc);
    report.average.image_ap = mean_of(i_ap);
    report.average.pixel_auroc = mean_of(p_auroc);
    report.average.pro = mean_of(p_pro);
    return report;
}

} // namespace mrad::eval
