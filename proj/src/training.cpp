#include "icreg/training.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "icreg/io.hpp"

namespace icreg::training {

namespace {

template <class T>
T field_or(const nlohmann::json& j, const char* key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument(std::string("config field '") + key + "': " + e.what());
    }
}

}  // namespace

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw std::invalid_argument("config: expected a JSON object");
    const int version = field_or(j, "version", kConfigVersion);
    if (version != kConfigVersion)
        throw std::invalid_argument("config: unsupported version " + std::to_string(version));
    if (!j.contains("model")) throw std::invalid_argument("config: missing 'model'");
    if (!j.contains("dataset")) throw std::invalid_argument("config: missing 'dataset'");
    TrainConfig c;
    c.model = j.at("model");
    c.dataset = j.at("dataset");
    c.lambda = field_or(j, "lambda", c.lambda);
    c.sigma = field_or(j, "sigma", c.sigma);
    c.learning_rate = field_or(j, "learning_rate", c.learning_rate);
    c.batch = field_or(j, "batch", c.batch);
    c.iterations = field_or(j, "iterations", c.iterations);
    c.seed = field_or(j, "seed", c.seed);
    c.checkpoint_every = field_or(j, "checkpoint_every", c.checkpoint_every);
    c.log_every = field_or(j, "log_every", c.log_every);
    c.eval_pairs = field_or(j, "eval_pairs", c.eval_pairs);
    c.validate();
    return c;
}

nlohmann::json TrainConfig::to_json() const {
    return {{"version", kConfigVersion}, {"model", model},
            {"dataset", dataset},        {"lambda", lambda},
            {"sigma", sigma},            {"learning_rate", learning_rate},
            {"batch", batch},            {"iterations", iterations},
            {"seed", seed},              {"checkpoint_every", checkpoint_every},
            {"log_every", log_every},    {"eval_pairs", eval_pairs}};
}

void TrainConfig::validate() const {
    if (!(lambda >= 0.0)) throw std::invalid_argument("config: lambda must be >= 0");
    if (!(sigma > 0.0)) throw std::invalid_argument("config: sigma must be > 0");
    if (!(learning_rate >= 0.0)) throw std::invalid_argument("config: learning_rate must be >= 0");
    if (batch == 0) throw std::invalid_argument("config: batch must be >= 1");
    if (iterations == 0) throw std::invalid_argument("config: iterations must be >= 1");
}

data::Dataset resolve_dataset(const nlohmann::json& spec) {
    if (spec.is_string()) return data::load_dataset(spec.get<std::string>());
    if (!spec.is_object()) throw std::invalid_argument("dataset: expected a path or a generator object");
    const auto gen = field_or<std::string>(spec, "generator", "");
    const auto count = field_or<std::size_t>(spec, "count", 64);
    const auto size = field_or<std::size_t>(spec, "size", 32);
    const auto seed = field_or<std::uint64_t>(spec, "seed", 0);
    if (gen == "tri_circ") return data::gen_tri_circ(count, size, seed);
    if (gen == "blob_digits") return data::gen_blob_digits(count, size, seed);
    if (gen == "idx") {
        std::optional<int> digit;
        if (spec.contains("digit")) digit = spec.at("digit").get<int>();
        auto ds = data::load_idx(spec.at("images").get<std::string>(), spec.at("labels").get<std::string>(), digit);
        if (spec.contains("count") && ds.images.size() > count) ds.images.resize(count);
        return ds;
    }
    throw std::invalid_argument("dataset: unknown generator '" + gen + "'");
}

LossResult loss(const nets::RegistrationModel& model, const ParamBinding& params, const Tensor& a, const Tensor& b,
                double lambda, double sigma) {
    LossResult r{Tensor::scalar(0.0), 0.0, 0.0, model.forward(params, a, b)};
    const Tensor warped = lie::warp_image(a, r.output.transform);
    Tensor sim = ad::scalar_mul(metrics::lncc(warped, b, sigma), -1.0);
    r.similarity = sim.item();
    r.value = sim;
    if (lambda > 0.0 && !r.output.velocity_fields.empty()) {
        Tensor reg = metrics::bending_energy(r.output.velocity_fields.front());
        for (std::size_t k = 1; k < r.output.velocity_fields.size(); ++k)
            reg = ad::add(reg, metrics::bending_energy(r.output.velocity_fields[k]));
        r.regularizer = reg.item();
        r.value = ad::add(sim, ad::scalar_mul(reg, lambda));
    }
    return r;
}

void adam_step(ParamStore& store, const GradMap& grads, double lr, double beta1, double beta2, double eps) {
    for (const auto& name : store.names()) {
        const auto it = grads.find(name);
        if (it == grads.end()) throw std::invalid_argument("adam_step: no gradient for '" + name + "'");
        if (it->second.size() != store.at(name).value.size())
            throw std::invalid_argument("adam_step: gradient for '" + name + "' has " +
                                        std::to_string(it->second.size()) + " entries, parameter has " +
                                        std::to_string(store.at(name).value.size()));
    }
    for (const auto& name : store.names()) {
        Parameter& p = store.at(name);
        const auto& g = grads.at(name);
        p.first_moment.resize(p.value.size(), 0.0);
        p.second_moment.resize(p.value.size(), 0.0);
        ++p.step;
        const double c1 = 1.0 - std::pow(beta1, static_cast<double>(p.step));
        const double c2 = 1.0 - std::pow(beta2, static_cast<double>(p.step));
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            p.first_moment[i] = beta1 * p.first_moment[i] + (1.0 - beta1) * g[i];
            p.second_moment[i] = beta2 * p.second_moment[i] + (1.0 - beta2) * g[i] * g[i];
            p.value[i] -= lr * (p.first_moment[i] / c1) / (std::sqrt(p.second_moment[i] / c2) + eps);
        }
    }
}

BatchStep batch_gradients(const nets::RegistrationModel& model, const ParamStore& store,
                          const std::vector<std::pair<const data::Image*, const data::Image*>>& pairs,
                          double lambda, double sigma) {
    if (pairs.empty()) throw std::invalid_argument("batch_gradients: empty batch");
    BatchStep out;
    for (const auto& name : store.names()) out.grads[name].assign(store.at(name).value.size(), 0.0);
    const double w = 1.0 / static_cast<double>(pairs.size());
    for (const auto& [a, b] : pairs) {
        ad::Tape tape;
        const ParamBinding params = store.bind(&tape);
        const LossResult r = loss(model, params, a->tensor(), b->tensor(), lambda, sigma);
        out.similarity += w * r.similarity;
        out.regularizer += w * r.regularizer;
        out.loss += w * r.value.item();
        if (!std::isfinite(r.value.item())) continue;
        const ad::Gradients g = ad::backprop(r.value);
        for (auto& [name, acc] : out.grads) {
            const auto gi = g.of(params[name]);
            for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += w * gi[i];
        }
    }
    return out;
}

std::vector<std::pair<std::size_t, std::size_t>> eval_pairs(std::size_t count, std::size_t n, std::uint64_t seed) {
    data::PairSampler sampler(count, seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t k = 0; k < n; ++k) out.push_back(sampler.next());
    return out;
}

metrics::MetricsReport evaluate_pairs(const nets::RegistrationModel& model, const ParamStore& store,
                                      const data::Dataset& dataset,
                                      const std::vector<std::pair<std::size_t, std::size_t>>& pairs, double lambda,
                                      double sigma) {
    if (pairs.empty()) throw std::invalid_argument("evaluate_pairs: no pairs");
    const ParamBinding params = store.bind(nullptr);
    metrics::MetricsReport rep;
    double dice_sum = 0.0, mtre_sum = 0.0;
    std::size_t dice_n = 0, mtre_n = 0;
    const double w = 1.0 / static_cast<double>(pairs.size());
    for (const auto& [i, j] : pairs) {
        const auto& A = dataset.images.at(i);
        const auto& B = dataset.images.at(j);
        const std::size_t h = A.height, wd = A.width;
        const LossResult r = loss(model, params, A.tensor(), B.tensor(), lambda, sigma);
        const lie::Transform& ab = r.output.transform;
        const lie::Transform ba = model.forward(params, B.tensor(), A.tensor()).transform;
        rep.similarity += w * r.similarity;
        rep.regularizer += w * r.regularizer;
        rep.loss += w * r.value.item();
        rep.pct_neg_jacobian += w * metrics::jacobian_stats(ab, h, wd).pct_negative;
        rep.inv_consistency_err += w * metrics::inv_consistency_error(ab, ba, h, wd);
        if (!A.labels.empty() && !B.labels.empty()) {
            std::vector<double> la(A.labels.begin(), A.labels.end());
            const Tensor warped = lie::warp_image(Tensor::constant({h, wd}, la), ab);
            const auto mask = data::threshold_mask(warped.values());
            dice_sum += metrics::dice(mask, B.labels);
            ++dice_n;
        }
        if (!A.landmarks.empty() && A.landmarks.size() == B.landmarks.size()) {
            std::vector<double> pts;
            for (const auto& p : B.landmarks) pts.insert(pts.end(), {p[0], p[1]});
            const Tensor mapped = ab.apply(Tensor::constant({B.landmarks.size(), 2}, pts));
            std::vector<std::array<double, 2>> m;
            for (std::size_t k = 0; k < B.landmarks.size(); ++k) m.push_back({mapped[2 * k], mapped[2 * k + 1]});
            mtre_sum += metrics::landmark_mtre(m, A.landmarks, h, wd);
            ++mtre_n;
        }
    }
    if (dice_n) rep.dice = dice_sum / static_cast<double>(dice_n);
    if (mtre_n) rep.landmark_mtre = mtre_sum / static_cast<double>(mtre_n);
    return rep;
}

TrainResult train(const TrainConfig& cfg, const data::Dataset& dataset,
                  const std::optional<std::filesystem::path>& out_dir, const std::string& run_id) {
    cfg.validate();
    if (dataset.images.size() < 2) throw std::invalid_argument("train: dataset needs at least two images");
    const nets::ModelPtr model = nets::build_model(cfg.model);
    TrainResult res;
    model->init(res.store);
    data::PairSampler sampler(dataset.images.size(), cfg.seed);
    const auto probe = eval_pairs(dataset.images.size(), std::max<std::size_t>(cfg.eval_pairs, 1), cfg.seed);

    std::ostringstream csv;
    csv << metrics::csv_header() << '\n';
    auto log = [&](std::size_t step) {
        const auto rep = evaluate_pairs(*model, res.store, dataset, probe, cfg.lambda, cfg.sigma);
        res.logs.emplace_back(step, rep);
        csv << metrics::csv_row(run_id, step, rep) << '\n';
    };
    if (out_dir) {
        std::filesystem::create_directories(*out_dir);
        io::write_file(*out_dir / "model.json", cfg.model.dump(2) + "\n");
        io::write_file(*out_dir / "config.json", cfg.to_json().dump(2) + "\n");
    }
    auto write_csv = [&] {
        if (out_dir) io::write_file(*out_dir / "metrics.csv", csv.str());
    };

    for (std::size_t it = 0; it < cfg.iterations; ++it) {
        if (cfg.log_every && it % cfg.log_every == 0) {
            try {
                log(it);
            } catch (const std::exception& e) {
                write_csv();
                throw TrainingFailed(it, e.what());
            }
        }
        std::vector<std::pair<const data::Image*, const data::Image*>> batch;
        for (std::size_t k = 0; k < cfg.batch; ++k) {
            const auto [i, j] = sampler.next();
            batch.emplace_back(&dataset.images[i], &dataset.images[j]);
        }
        BatchStep step;
        try {
            step = batch_gradients(*model, res.store, batch, cfg.lambda, cfg.sigma);
        } catch (const std::exception& e) {
            write_csv();
            throw TrainingFailed(it, e.what());
        }
        res.history.push_back({step.similarity, step.regularizer, step.loss});
        if (!std::isfinite(step.loss)) {
            write_csv();
            throw NonFiniteLoss(it);
        }
        adam_step(res.store, step.grads, cfg.learning_rate);
        if (out_dir && cfg.checkpoint_every && (it + 1) % cfg.checkpoint_every == 0 && it + 1 < cfg.iterations) {
            char name[32];
            std::snprintf(name, sizeof name, "ckpt_%06zu.icckpt", it + 1);
            save_checkpoint(res.store, *out_dir / name);
        }
    }
    log(cfg.iterations);
    write_csv();
    if (out_dir) save_checkpoint(res.store, *out_dir / "ckpt_final.icckpt");
    return res;
}

TrainResult train(const TrainConfig& cfg, const std::optional<std::filesystem::path>& out_dir) {
    return train(cfg, resolve_dataset(cfg.dataset), out_dir);
}

InstanceResult instance_optimize(const ParamStore& trained, const nets::RegistrationModel& model, const Tensor& a,
                                 const Tensor& b, std::size_t steps, double lr, double lambda, double sigma) {
    InstanceResult res{lie::Transform::identity(2), trained, 0.0, 0.0};
    for (const auto& name : res.store.names()) {
        Parameter& p = res.store.at(name);
        p.first_moment.assign(p.value.size(), 0.0);
        p.second_moment.assign(p.value.size(), 0.0);
        p.step = 0;
    }
    for (std::size_t s = 0; s < steps; ++s) {
        ad::Tape tape;
        const ParamBinding params = res.store.bind(&tape);
        const LossResult r = loss(model, params, a, b, lambda, sigma);
        if (!std::isfinite(r.value.item())) throw NonFiniteLoss(s);
        if (s == 0) res.loss_before = r.value.item();
        const ad::Gradients g = ad::backprop(r.value);
        GradMap grads;
        for (const auto& name : res.store.names()) grads[name] = g.of(params[name]);
        adam_step(res.store, grads, lr);
    }
    const LossResult fin = loss(model, res.store.bind(nullptr), a, b, lambda, sigma);
    if (steps == 0) res.loss_before = fin.value.item();
    res.loss_after = fin.value.item();
    res.transform = fin.output.transform;
    return res;
}

}  // namespace icreg::training
