#include "floodseg/metrics.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "floodseg/errors.hpp"

namespace floodseg {

BinaryMask::BinaryMask(std::int64_t h, std::int64_t w)
    : height(h), width(w), pixels(static_cast<std::size_t>(h * w), 0) {
    if (h <= 0 || w <= 0) throw InvalidParam("mask dimensions must be positive");
}

BinaryMask::BinaryMask(std::int64_t h, std::int64_t w, std::vector<std::uint8_t> px)
    : height(h), width(w), pixels(std::move(px)) {
    if (h <= 0 || w <= 0) throw InvalidParam("mask dimensions must be positive");
    validate();
}

void BinaryMask::validate() const {
    if (static_cast<std::int64_t>(pixels.size()) != height * width) {
        throw ShapeMismatch("mask holds " + std::to_string(pixels.size()) + " pixels, expected " +
                            std::to_string(height * width));
    }
    for (std::uint8_t p : pixels) {
        if (p != 0 && p != 1) throw InvalidParam("mask pixel outside {0,1}");
    }
}

BinaryMask complement(const BinaryMask& mask) {
    BinaryMask out(mask.height, mask.width);
    for (std::size_t i = 0; i < mask.pixels.size(); ++i) out.pixels[i] = mask.pixels[i] ? 0 : 1;
    return out;
}

BinaryMask transpose(const BinaryMask& mask) {
    BinaryMask out(mask.width, mask.height);
    for (std::int64_t y = 0; y < mask.height; ++y)
        for (std::int64_t x = 0; x < mask.width; ++x) out.at(x, y) = mask.at(y, x);
    return out;
}

double flood_capacity(const BinaryMask& mask) {
    if (mask.count() == 0) throw EmptyMask("flood_capacity of an empty mask");
    std::int64_t water = 0;
    for (std::uint8_t p : mask.pixels) water += p;
    return static_cast<double>(water) / static_cast<double>(mask.count());
}

static void check_same_dims(const BinaryMask& a, const BinaryMask& b, const char* op) {
    if (a.height != b.height || a.width != b.width) {
        throw ShapeMismatch(std::string(op) + ": " + std::to_string(a.height) + "x" +
                            std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" +
                            std::to_string(b.width));
    }
}

IouResult miou(const BinaryMask& pred, const BinaryMask& truth) {
    check_same_dims(pred, truth, "miou");
    std::int64_t inter1 = 0, union1 = 0, inter0 = 0, union0 = 0;
    for (std::size_t i = 0; i < pred.pixels.size(); ++i) {
        const bool p = pred.pixels[i] != 0;
        const bool t = truth.pixels[i] != 0;
        inter1 += (p && t);
        union1 += (p || t);
        inter0 += (!p && !t);
        union0 += (!p || !t);
    }
    IouResult r;
    r.iou_water = union1 == 0 ? 1.0 : static_cast<double>(inter1) / static_cast<double>(union1);
    r.iou_background = union0 == 0 ? 1.0 : static_cast<double>(inter0) / static_cast<double>(union0);
    r.miou = 0.5 * (r.iou_water + r.iou_background);
    return r;
}

double pixel_accuracy(const BinaryMask& pred, const BinaryMask& truth) {
    check_same_dims(pred, truth, "pixel_accuracy");
    std::int64_t agree = 0;
    for (std::size_t i = 0; i < pred.pixels.size(); ++i)
        agree += (pred.pixels[i] == truth.pixels[i]);
    return static_cast<double>(agree) / static_cast<double>(pred.count());
}

BinaryMask binarize(const Tensor& probabilities, double threshold) {
    if (probabilities.rank() != 3 || probabilities.dim(0) != 1) {
        throw ShapeMismatch("binarize: expected [1×H×W], got " + to_string(probabilities.shape()));
    }
    if (!(threshold > 0.0 && threshold < 1.0)) {
        throw InvalidParam("binarize: threshold must lie in (0,1)");
    }
    for (double v : probabilities.values()) {
        if (!(v >= 0.0 && v <= 1.0)) throw InvalidParam("binarize: probability outside [0,1]");
    }
    BinaryMask mask(probabilities.dim(1), probabilities.dim(2));
    const double* p = probabilities.data();
    for (std::size_t i = 0; i < mask.pixels.size(); ++i) mask.pixels[i] = p[i] >= threshold ? 1 : 0;
    return mask;
}

Tensor to_tensor(const BinaryMask& mask) {
    std::vector<double> values(mask.pixels.size());
    for (std::size_t i = 0; i < mask.pixels.size(); ++i)
        values[i] = static_cast<double>(mask.pixels[i]);
    return Tensor::from({1, mask.height, mask.width}, std::move(values));
}

FloodReport aggregate(std::vector<ImageMetrics> per_image) {
    if (per_image.empty()) throw EmptyInput("aggregate over zero images");
    const double n = static_cast<double>(per_image.size());
    FloodReport report;
    report.per_image = std::move(per_image);
    double miou_sum = 0.0, pa_sum = 0.0;
    for (const ImageMetrics& m : report.per_image) {
        miou_sum += m.miou;
        pa_sum += m.pa;
    }
    report.aggregate.miou_mean = miou_sum / n;
    report.aggregate.pa_mean = pa_sum / n;
    double miou_var = 0.0, pa_var = 0.0;
    for (const ImageMetrics& m : report.per_image) {
        miou_var += (m.miou - report.aggregate.miou_mean) * (m.miou - report.aggregate.miou_mean);
        pa_var += (m.pa - report.aggregate.pa_mean) * (m.pa - report.aggregate.pa_mean);
    }
    report.aggregate.miou_std = std::sqrt(miou_var / n);
    report.aggregate.pa_std = std::sqrt(pa_var / n);
    return report;
}

void write_report(std::ostream& out, const FloodReport& report) {
    out << std::fixed << std::setprecision(6);
    for (const ImageMetrics& m : report.per_image) {
        out << m.id << '\t' << m.fc << '\t' << m.iou_water << '\t' << m.iou_background << '\t'
            << m.miou << '\t' << m.pa << '\n';
    }
    out << "AGGREGATE\t" << report.aggregate.miou_mean << '\t' << report.aggregate.miou_std << '\t'
        << report.aggregate.pa_mean << '\t' << report.aggregate.pa_std << '\n';
}

void write_report_file(const std::string& path, const FloodReport& report) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open report file " + path);
    write_report(out, report);
    if (!out) throw IoError("failed writing report file " + path);
}

FloodReport read_report(std::istream& in) {
    FloodReport report;
    std::string line;
    bool saw_aggregate = false;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string id;
        if (!std::getline(row, id, '\t')) throw DecodeError("malformed report line: " + line);
        if (id == "AGGREGATE") {
            if (!(row >> report.aggregate.miou_mean >> report.aggregate.miou_std >>
                  report.aggregate.pa_mean >> report.aggregate.pa_std)) {
                throw DecodeError("malformed aggregate line: " + line);
            }
            saw_aggregate = true;
            continue;
        }
        ImageMetrics m;
        m.id = id;
        if (!(row >> m.fc >> m.iou_water >> m.iou_background >> m.miou >> m.pa)) {
            throw DecodeError("malformed report line: " + line);
        }
        report.per_image.push_back(std::move(m));
    }
    if (!saw_aggregate) throw DecodeError("report missing AGGREGATE line");
    return report;
}

}  // namespace floodseg
