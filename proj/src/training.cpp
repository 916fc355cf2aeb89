#include "hcseg/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "hcseg/netpbm.hpp"

namespace hcseg {

using nlohmann::ordered_json;

void adamw_update(std::span<double> param, std::span<const double> grad, std::span<double> m, std::span<double> v,
                  std::size_t t, double lr, double weight_decay, double beta1, double beta2, double eps) {
    if (grad.size() != param.size() || m.size() != param.size() || v.size() != param.size()) {
        throw DimensionError("adamw_update: parameter, gradient and moment sizes differ");
    }
    if (t == 0) throw ContractError("adamw_update: step count is 1-based");
    const double c1 = 1.0 - std::pow(beta1, double(t));
    const double c2 = 1.0 - std::pow(beta2, double(t));
    const double shrink = 1.0 - lr * weight_decay;
    for (std::size_t i = 0; i < param.size(); ++i) {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
        const double mhat = m[i] / c1, vhat = v[i] / c2;
        param[i] = param[i] * shrink - lr * mhat / (std::sqrt(vhat) + eps);
    }
}

void AdamW::step(ParameterSet& params, double lr) {
    ++steps_;
    for (NamedParameter& p : params.entries()) {
        const std::size_t n = p.value.numel();
        Moments& mom = state_[p.name];
        if (mom.m.size() != n) {
            mom.m.assign(n, 0.0);
            mom.v.assign(n, 0.0);
        }
        std::vector<double> zero;
        std::span<const double> g = p.value.grad();
        if (g.size() != n) {
            zero.assign(n, 0.0);
            g = zero;
        }
        adamw_update(p.value.mutable_data(), g, mom.m, mom.v, steps_, lr, p.decay ? cfg_.weight_decay : 0.0,
                     cfg_.beta1, cfg_.beta2, cfg_.eps);
    }
}

LossBreakdown total_loss(const ModelOutput& out, const LabelMap& semantic, const LabelMap& instance,
                         std::span<const Tensor> scales, const LossWeights& weights) {
    weights.validate();
    if (semantic.height != out.image.height || semantic.width != out.image.width) {
        throw DimensionError("total_loss: ground truth resolution differs from the image");
    }
    LossBreakdown b;
    const Tensor reg = scale_regularizer(scales);
    b.reg = reg.item();
    Tensor total = scale(reg, weights.reg);

    if (out.full.semantics == MaskSemantics::class_probabilities) {
        const Tensor ce = pixel_cross_entropy(out.full.values, semantic);
        b.pixel = ce.item();
        total = add(total, scale(ce, weights.pixel));
        b.total = total;
        return b;
    }

    const GtSegments gt = extract_segments(semantic, instance);
    const Tensor cost = matching_cost(out.full.values, out.class_probs, gt.masks, gt.classes, weights);
    MatchResult match = hungarian_match(cost);
    if (!match.pairs.empty()) {
        std::vector<std::size_t> qs, gs;
        for (const auto& [q, g] : match.pairs) {
            qs.push_back(q);
            gs.push_back(g);
        }
        const Tensor pred = gather_columns(out.full.values, qs);
        const Tensor target = gather_columns(gt.masks, gs);
        const Tensor bce = bce_mask_loss(pred, target);
        const Tensor dice = dice_loss(pred, target);
        b.mask_ce = bce.item();
        b.dice = dice.item();
        total = add(total, add(scale(bce, weights.ce), scale(dice, weights.dice)));
    }
    const Tensor cls = classification_loss(out.class_probs, match, gt.classes, weights.no_object);
    b.cls = cls.item();
    total = add(total, scale(cls, weights.cls));
    b.total = total;
    b.match = std::move(match);
    return b;
}

double TrainConfig::lr_at(std::size_t step) const {
    const auto boundary = static_cast<std::size_t>(std::floor(decay_at * double(steps)));
    const double lr = step >= boundary ? optimizer.lr * decay_factor : optimizer.lr;
    return step < warmup_steps ? lr * double(step + 1) / double(warmup_steps) : lr;
}

double clip_grad_norm(ParameterSet& params, double max_norm) {
    double sq = 0.0;
    for (const auto& e : params.entries()) {
        for (double g : e.value.grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double f = max_norm / norm;
        for (auto& e : params.entries()) {
            for (double& g : e.value.mutable_grad()) g *= f;
        }
    }
    return norm;
}

Sample hflip(const Sample& s) {
    Sample f = s;
    const std::size_t h = s.rgb.height, w = s.rgb.width;
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            const std::size_t src = y * w + (w - 1 - x), dst = y * w + x;
            for (std::size_t c = 0; c < 3; ++c) f.rgb.pixels[dst * 3 + c] = s.rgb.pixels[src * 3 + c];
            f.semantic.labels[dst] = s.semantic.labels[src];
            f.instance.labels[dst] = s.instance.labels[src];
        }
    f.image = image_to_tensor(f.rgb);
    return f;
}

EvalReport evaluate(const Model& model, std::span<const Sample> samples) {
    const std::size_t k = model.config().num_classes;
    const bool panoptic = model.config().head == HeadKind::mask_query;
    ConfusionMatrix confusion(k), confusion_hard(k);
    PanopticAccumulator pq(k, static_cast<std::int32_t>(k)), pq_hard(k, static_cast<std::int32_t>(k));
    EvalReport report;
    report.images = samples.size();
    for (const Sample& s : samples) {
        const ModelOutput out = model.forward(s.image);
        const Prediction pred = predict(out, k);
        confusion.add(pred.semantic, s.semantic);
        if (panoptic) pq.add(pred.semantic, pred.instance, s.semantic, s.instance);
        const Prediction hard = predict(model.forward(s.image, true), k);
        confusion_hard.add(hard.semantic, s.semantic);
        if (panoptic) pq_hard.add(hard.semantic, hard.instance, s.semantic, s.instance);

        const std::vector<LabelMap> parts = cluster_partitions(out);
        if (report.levels.empty()) {
            for (const HookLevel& h : out.pyramid.levels) report.levels.push_back({h.level, 0.0, 0.0, 0.0});
        }
        for (std::size_t i = 0; i < parts.size(); ++i) {
            LevelReport& r = report.levels[i];
            r.ue += undersegmentation_error(parts[i], s.instance, UeVariant::min_side).error;
            r.ue_leak_all += undersegmentation_error(parts[i], s.instance, UeVariant::leak_all).error;
            r.entropy += assignment_entropy(out.pyramid.levels[i].assignment);
        }
    }
    if (!samples.empty()) {
        for (LevelReport& r : report.levels) {
            r.ue /= double(samples.size());
            r.ue_leak_all /= double(samples.size());
            r.entropy /= double(samples.size());
        }
    }
    report.semantic.iou = confusion.iou();
    report.semantic.mean_iou = confusion.mean_iou();
    report.semantic.pixel_accuracy = confusion.pixel_accuracy();
    report.semantic_hard.iou = confusion_hard.iou();
    report.semantic_hard.mean_iou = confusion_hard.mean_iou();
    report.semantic_hard.pixel_accuracy = confusion_hard.pixel_accuracy();
    if (panoptic) {
        report.panoptic = pq.result();
        report.panoptic_hard = pq_hard.result();
    }
    return report;
}

ordered_json to_json(const EvalReport& r, const std::vector<std::string>& class_names) {
    ordered_json j;
    j["images"] = r.images;
    j["mean_iou"] = r.semantic.mean_iou;
    j["pixel_accuracy"] = r.semantic.pixel_accuracy;
    ordered_json per_class = ordered_json::array();
    for (std::size_t c = 0; c < r.semantic.iou.size(); ++c) {
        ordered_json e;
        e["class"] = c;
        if (c < class_names.size()) e["name"] = class_names[c];
        e["iou"] = r.semantic.iou[c] ? ordered_json(*r.semantic.iou[c]) : ordered_json(nullptr);
        per_class.push_back(e);
    }
    j["class_iou"] = per_class;
    if (r.panoptic) {
        j["pq"] = r.panoptic->pq;
        j["sq"] = r.panoptic->sq;
        j["rq"] = r.panoptic->rq;
    } else {
        j["pq"] = nullptr;
        j["sq"] = nullptr;
        j["rq"] = nullptr;
    }
    j["hard_decode"] = {{"mean_iou", r.semantic_hard.mean_iou},
                        {"pixel_accuracy", r.semantic_hard.pixel_accuracy},
                        {"pq", r.panoptic_hard ? ordered_json(r.panoptic_hard->pq) : ordered_json(nullptr)}};
    j["ue_variant"] = "min_side";
    j["ue_reference"] = "instance";
    ordered_json levels = ordered_json::array();
    for (const LevelReport& l : r.levels) {
        levels.push_back({{"level", l.level},
                          {"ue", l.ue},
                          {"ue_leak_all", l.ue_leak_all},
                          {"entropy", l.entropy}});
    }
    j["levels"] = levels;
    return j;
}

namespace {

ordered_json scales_json(const Model& model) {
    ordered_json a = ordered_json::array();
    for (const Tensor& s : model.scales()) a.push_back(s.item());
    return a;
}

} // namespace

TrainResult train(Model& model, AdamW& optimizer, std::span<const Sample> train_set, std::span<const Sample> val_set,
                  const TrainConfig& cfg, const LogSink& sink) {
    if (cfg.steps > 0 && train_set.empty()) throw ContractError("train: empty training set");
    if (cfg.batch_size == 0) throw ContractError("train: batch_size must be positive");
    cfg.loss.validate();

    TrainResult result;
    const auto emit = [&](ordered_json rec) {
        if (sink) sink(rec);
        result.log.push_back(std::move(rec));
    };

    std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::size_t cursor = order.size();

    const std::vector<Tensor> scales = model.scales();
    const std::size_t num_levels = scales.size();
    double acc_grad_norm = 0.0;
    double acc_loss = 0.0, acc_ce = 0.0, acc_dice = 0.0, acc_cls = 0.0, acc_pixel = 0.0;
    std::vector<double> acc_entropy(num_levels, 0.0);
    std::size_t acc_n = 0, acc_items = 0;

    if (!val_set.empty()) {
        ordered_json rec;
        rec["kind"] = "eval";
        rec["step"] = 0;
        rec["metrics"] = to_json(evaluate(model, val_set));
        emit(rec);
    }

    for (std::size_t step = 0; step < cfg.steps; ++step) {
        model.params().zero_grad();
        double step_loss = 0.0;
        {
        Tape tape;
        TapeScope scope(tape);
        Tensor batch_loss;
        for (std::size_t b = 0; b < cfg.batch_size; ++b) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), rng);
                cursor = 0;
            }
            const Sample& raw = train_set[order[cursor++]];
            const bool flip = cfg.hflip && (rng() & 1U);
            const Sample flipped = flip ? hflip(raw) : Sample{};
            const Sample& s = flip ? flipped : raw;

            const ModelOutput out = model.forward(s.image);
            const LossBreakdown lb = total_loss(out, s.semantic, s.instance, scales, cfg.loss);
            batch_loss = batch_loss.defined() ? add(batch_loss, lb.total) : lb.total;
            acc_ce += lb.mask_ce;
            acc_dice += lb.dice;
            acc_cls += lb.cls;
            acc_pixel += lb.pixel;
            for (std::size_t l = 0; l < num_levels; ++l) {
                acc_entropy[l] += assignment_entropy(out.pyramid.levels[l].assignment);
            }
            ++acc_items;
        }
        const Tensor loss = scale(batch_loss, 1.0 / double(cfg.batch_size));
        step_loss = loss.item();
        tape.backward(loss);
        }
        acc_grad_norm += clip_grad_norm(model.params(), cfg.grad_clip);
        const double lr = cfg.lr_at(step);
        optimizer.step(model.params(), lr);

        result.losses.push_back(step_loss);
        acc_loss += step_loss;
        ++acc_n;

        const bool last = step + 1 == cfg.steps;
        if ((cfg.log_every > 0 && (step + 1) % cfg.log_every == 0) || last) {
            ordered_json rec;
            rec["kind"] = "train";
            rec["step"] = step + 1;
            rec["lr"] = lr;
            rec["loss"] = acc_loss / double(acc_n);
            const double items = double(acc_items);
            rec["components"] = {{"mask_ce", acc_ce / items},
                                 {"dice", acc_dice / items},
                                 {"cls", acc_cls / items},
                                 {"pixel", acc_pixel / items},
                                 {"reg", scale_regularizer(scales).item()}};
            rec["grad_norm"] = acc_grad_norm / double(acc_n);
            rec["scales"] = scales_json(model);
            ordered_json ent = ordered_json::array();
            for (double e : acc_entropy) ent.push_back(e / items);
            rec["entropy"] = ent;
            emit(rec);
            acc_loss = acc_ce = acc_dice = acc_cls = acc_pixel = acc_grad_norm = 0.0;
            std::fill(acc_entropy.begin(), acc_entropy.end(), 0.0);
            acc_n = acc_items = 0;
        }
        const bool periodic = cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0;
        if (!val_set.empty() && (periodic || last)) {
            ordered_json rec;
            rec["kind"] = "eval";
            rec["step"] = step + 1;
            rec["metrics"] = to_json(evaluate(model, val_set));
            emit(rec);
        }
    }
    return result;
}

void save_checkpoint(const std::filesystem::path& path, const Model& model, const AdamW& optimizer,
                     const ordered_json& config) {
    ordered_json j;
    j["format"] = "hcseg-checkpoint";
    j["version"] = 1;
    const std::string dumped = config.dump();
    j["config_hash"] = fnv1a64(dumped);
    j["config"] = config;
    ordered_json params = ordered_json::object();
    for (const NamedParameter& p : model.params().entries()) {
        params[p.name] = {{"shape", p.value.shape()},
                          {"data", std::vector<double>(p.value.data().begin(), p.value.data().end())}};
    }
    j["params"] = params;
    ordered_json moments = ordered_json::object();
    for (const auto& [name, mom] : optimizer.state()) moments[name] = {{"m", mom.m}, {"v", mom.v}};
    j["optimizer"] = {{"step", optimizer.steps()}, {"moments", moments}};
    const std::string text = j.dump();
    write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

namespace {

ordered_json read_checkpoint_json(const std::filesystem::path& path) {
    const std::vector<std::uint8_t> bytes = read_file(path);
    ordered_json j;
    try {
        j = ordered_json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError("checkpoint " + path.string() + ": " + e.what(), e.byte);
    }
    if (j.value("format", "") != "hcseg-checkpoint" || j.value("version", 0) != 1) {
        throw IoError("checkpoint " + path.string() + ": unsupported format or version");
    }
    if (fnv1a64(j.at("config").dump()) != j.at("config_hash").get<std::uint64_t>()) {
        throw IoError("checkpoint " + path.string() + ": config hash mismatch");
    }
    return j;
}

} // namespace

ordered_json read_checkpoint_config(const std::filesystem::path& path) { return read_checkpoint_json(path).at("config"); }

Checkpoint load_checkpoint(const std::filesystem::path& path, Model& model, AdamW* optimizer) {
    const ordered_json j = read_checkpoint_json(path);
    const ordered_json& params = j.at("params");
    if (params.size() != model.params().entries().size()) {
        throw IoError("checkpoint " + path.string() + ": parameter count differs from the model");
    }
    for (NamedParameter& p : model.params().entries()) {
        if (!params.contains(p.name)) throw IoError("checkpoint " + path.string() + ": missing parameter " + p.name);
        const ordered_json& e = params.at(p.name);
        if (e.at("shape").get<Shape>() != p.value.shape()) {
            throw IoError("checkpoint " + path.string() + ": shape mismatch for " + p.name);
        }
        const auto data = e.at("data").get<std::vector<double>>();
        std::copy(data.begin(), data.end(), p.value.mutable_data().begin());
    }
    if (optimizer) {
        const ordered_json& o = j.at("optimizer");
        optimizer->set_steps(o.at("step").get<std::size_t>());
        optimizer->state().clear();
        for (const auto& [name, mom] : o.at("moments").items()) {
            optimizer->state()[name] = {mom.at("m").get<std::vector<double>>(), mom.at("v").get<std::vector<double>>()};
        }
    }
    return {j.at("config"), j.at("config_hash").get<std::uint64_t>()};
}

} // namespace hcseg
