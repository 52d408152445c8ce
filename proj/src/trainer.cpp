#include "floodseg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>

#include "floodseg/errors.hpp"

namespace floodseg {

void TrainConfig::validate() const {
    if (epochs < 0) throw InvalidParam("epochs must be non-negative");
    if (max_steps < 0) throw InvalidParam("max_steps must be non-negative");
    if (batch_size <= 0) throw InvalidParam("batch_size must be positive");
    if (!(learning_rate > 0.0)) throw InvalidParam("learning_rate must be positive");
    if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) {
        throw InvalidParam("adam betas must lie in (0,1)");
    }
    if (!(adam_eps > 0.0)) throw InvalidParam("adam_eps must be positive");
    if (!(w_bce > 0.0) || !(w_iou > 0.0)) throw InvalidParam("loss weights must be positive");
    for (double w : deep_supervision) {
        if (!(w > 0.0)) throw InvalidParam("deep-supervision weights must be positive");
    }
    if (eval_every <= 0) throw InvalidParam("eval_every must be positive");
    if (!(threshold > 0.0 && threshold < 1.0)) throw InvalidParam("threshold must lie in (0,1)");
}

TrainState init_state(const Model& model, const TrainConfig& cfg) {
    TrainState state;
    state.rng.seed(cfg.seed);
    for (const NamedParam& p : model.parameters()) {
        state.params.push_back(p.tensor);
        state.first_moment.emplace_back(static_cast<std::size_t>(p.tensor.size()), 0.0);
        state.second_moment.emplace_back(static_cast<std::size_t>(p.tensor.size()), 0.0);
    }
    return state;
}

namespace {

Tensor weighted_bce_iou(const Tensor& logits, const Tensor& target, const TrainConfig& cfg) {
    return add(scale(bce_with_logits(logits, target), cfg.w_bce),
               scale(soft_iou_loss(logits, target), cfg.w_iou));
}

}  // namespace

Tensor segmentation_loss(const Tensor& logits, std::span<const Tensor> aux_logits,
                         const BinaryMask& truth, const TrainConfig& cfg) {
    const Tensor target = to_tensor(truth);
    if (logits.shape() != target.shape()) {
        throw ShapeMismatch("loss: logits " + to_string(logits.shape()) + " vs mask " +
                            to_string(target.shape()));
    }
    if (aux_logits.size() > cfg.deep_supervision.size()) {
        throw InvalidParam("more aux heads than deep-supervision weights");
    }
    Tensor total = weighted_bce_iou(logits, target, cfg);
    for (std::size_t i = 0; i < aux_logits.size(); ++i) {
        const Tensor& aux = aux_logits[i];
        if (aux.rank() != 3 || aux.dim(0) != 1 || truth.height % aux.dim(1) != 0 ||
            truth.width % aux.dim(2) != 0 ||
            truth.height / aux.dim(1) != truth.width / aux.dim(2)) {
            throw ShapeMismatch("loss: aux head " + to_string(aux.shape()) +
                                " does not upsample to " + std::to_string(truth.height) + "×" +
                                std::to_string(truth.width));
        }
        const std::int64_t factor = truth.height / aux.dim(1);
        const Tensor full = factor == 1 ? aux : upsample_bilinear(aux, factor);
        total = add(total, scale(weighted_bce_iou(full, target, cfg), cfg.deep_supervision[i]));
    }
    return total;
}

void adam_step(TrainState& state, const std::vector<std::vector<double>>& grads,
               const TrainConfig& cfg) {
    if (grads.size() != state.params.size()) {
        throw ShapeMismatch("adam_step: " + std::to_string(grads.size()) + " gradients for " +
                            std::to_string(state.params.size()) + " parameters");
    }
    const std::int64_t t = state.step + 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < state.params.size(); ++i) {
        Tensor& param = state.params[i];
        const std::vector<double>& g = grads[i];
        if (static_cast<std::int64_t>(g.size()) != param.size()) {
            throw ShapeMismatch("adam_step: gradient " + std::to_string(i) + " has " +
                                std::to_string(g.size()) + " values, parameter has " +
                                std::to_string(param.size()));
        }
        std::vector<double>& m = state.first_moment[i];
        std::vector<double>& v = state.second_moment[i];
        double* p = param.data();
        for (std::size_t j = 0; j < g.size(); ++j) {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            const double m_hat = m[j] / bc1;
            const double v_hat = v[j] / bc2;
            p[j] -= cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.adam_eps);
        }
    }
    state.step = t;
}

FloodReport evaluate_with(const std::function<BinaryMask(const Sample&)>& predict,
                          std::span<const Sample> test) {
    if (test.empty()) throw EmptySplit("evaluate on an empty test split");
    std::vector<ImageMetrics> per_image;
    per_image.reserve(test.size());
    for (const Sample& sample : test) {
        const BinaryMask pred = predict(sample);
        const IouResult iou = miou(pred, sample.mask);
        ImageMetrics m;
        m.id = sample.id;
        m.fc = flood_capacity(pred);
        m.iou_water = iou.iou_water;
        m.iou_background = iou.iou_background;
        m.miou = iou.miou;
        m.pa = pixel_accuracy(pred, sample.mask);
        per_image.push_back(std::move(m));
    }
    return aggregate(std::move(per_image));
}

FloodReport evaluate(const Model& model, std::span<const Sample> test, double threshold) {
    return evaluate_with(
        [&](const Sample& sample) {
            const ForwardResult result = model.forward(sample.image);
            return binarize(sigmoid(result.logits), threshold);
        },
        test);
}

FitResult fit(Model& model, std::span<const Sample> train, std::span<const Sample> test,
              const TrainConfig& cfg) {
    return fit(model, train, test, cfg, init_state(model, cfg));
}

FitResult fit(Model& model, std::span<const Sample> train, std::span<const Sample> test,
              const TrainConfig& cfg, TrainState state) {
    cfg.validate();
    if (train.empty()) throw EmptySplit("fit needs a non-empty train split");

    FitResult result;
    result.state = std::move(state);
    TrainState& st = result.state;

    bool saved = false;
    std::int64_t last_eval_step = -1;
    double last_loss = std::numeric_limits<double>::quiet_NaN();

    const auto run_eval = [&]() {
        if (test.empty()) return;
        const FloodReport report = evaluate(model, test, cfg.threshold);
        result.history.push_back(
            {st.step, last_loss, report.aggregate.miou_mean, report.aggregate.pa_mean});
        last_eval_step = st.step;
        if (report.aggregate.miou_mean > st.best_miou) {
            st.best_miou = report.aggregate.miou_mean;
            if (!cfg.checkpoint_path.empty()) {
                save_checkpoint(model, cfg.checkpoint_path);
                saved = true;
            }
        }
    };

    const std::int64_t n = static_cast<std::int64_t>(train.size());
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

    const std::int64_t step_cap =
        cfg.max_steps > 0 ? st.step + cfg.max_steps : std::numeric_limits<std::int64_t>::max();

    bool done = false;
    for (std::int64_t epoch = 0; epoch < cfg.epochs && !done; ++epoch) {
        for (std::int64_t i = n - 1; i > 0; --i) {
            const std::int64_t j =
                static_cast<std::int64_t>(st.rng() % static_cast<std::uint64_t>(i + 1));
            std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
        }
        for (std::int64_t start = 0; start < n && !done; start += cfg.batch_size) {
            const std::int64_t stop = std::min<std::int64_t>(start + cfg.batch_size, n);
            for (Tensor& p : st.params) p.clear_grad();
            {
                Tape tape;
                Tensor batch_loss;
                for (std::int64_t k = start; k < stop; ++k) {
                    const Sample& sample = train[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])];
                    const ForwardResult out = model.forward(sample.image);
                    const Tensor sample_loss =
                        segmentation_loss(out.logits, out.aux_logits, sample.mask, cfg);
                    batch_loss = batch_loss.defined() ? add(batch_loss, sample_loss) : sample_loss;
                }
                batch_loss = scale(batch_loss, 1.0 / static_cast<double>(stop - start));
                tape.backward(batch_loss);
                last_loss = batch_loss.item();
            }
            std::vector<std::vector<double>> grads;
            grads.reserve(st.params.size());
            for (Tensor& p : st.params) {
                if (p.has_grad()) {
                    grads.emplace_back(p.grad().begin(), p.grad().end());
                } else {
                    grads.emplace_back(static_cast<std::size_t>(p.size()), 0.0);
                }
            }
            adam_step(st, grads, cfg);
            if (st.step % cfg.eval_every == 0) run_eval();
            if (st.step >= step_cap) done = true;
        }
    }

    if (st.step != last_eval_step && st.step > 0) run_eval();
    if (!saved && !cfg.checkpoint_path.empty() && st.step > 0) {
        save_checkpoint(model, cfg.checkpoint_path);
    }
    return result;
}

FitResult fit(Model& model, const DatasetManifest& manifest, const TrainConfig& cfg) {
    const std::vector<Sample> train =
        load_split(manifest, Split::train, model.config().height, model.config().width);
    const std::vector<Sample> test =
        load_split(manifest, Split::test, model.config().height, model.config().width);
    if (train.empty()) throw EmptySplit("manifest has no train entries");
    return fit(model, train, test, cfg);
}

void write_history(std::ostream& out, std::span<const HistoryEntry> history) {
    out << std::fixed << std::setprecision(6);
    for (const HistoryEntry& h : history) {
        out << h.step << '\t' << h.loss << '\t' << h.miou << '\t' << h.pa << '\n';
    }
}

void write_history_file(const std::string& path, std::span<const HistoryEntry> history) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open history file " + path);
    write_history(out, history);
    if (!out) throw IoError("failed writing history file " + path);
}

}  // namespace floodseg
