#include "diffattack/bench.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "diffattack/errors.hpp"
#include "diffattack/rng.hpp"

namespace diffattack {

std::string method_name(MethodId m) {
    switch (m) {
        case MethodId::vanilla: return "vanilla";
        case MethodId::direct_perturb: return "direct_perturb";
        case MethodId::spk_constraint: return "spk_constraint";
        case MethodId::adv_constraint: return "adv_constraint";
    }
    return "?";
}

MethodId parse_method(const std::string& name) {
    for (MethodId m : kAllMethods)
        if (method_name(m) == name) return m;
    throw FormatError("unknown method '" + name + "'");
}

std::vector<ConversionJob> make_protocol(const std::vector<Utterance>& test, std::size_t n_speakers,
                                         std::size_t targets_per_source) {
    std::vector<ConversionJob> jobs;
    const std::size_t per = targets_per_source == 0 ? n_speakers - 1 : std::min(targets_per_source, n_speakers - 1);
    for (std::size_t i = 0; i < test.size(); ++i) {
        const std::size_t src = test[i].speaker_id;
        for (std::size_t k = 1; k <= per; ++k) jobs.push_back({i, src, (src + k) % n_speakers});
    }
    return jobs;
}

namespace {

const DecoderParams& decoder_for(MethodId m, const TrainedModels& models) {
    const DecoderParams* p = nullptr;
    switch (m) {
        case MethodId::vanilla:
        case MethodId::direct_perturb: p = models.vanilla; break;
        case MethodId::spk_constraint: p = models.spk; break;
        case MethodId::adv_constraint: p = models.adv; break;
    }
    if (!p) throw ContractError("no decoder supplied for method " + method_name(m));
    return *p;
}

template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
    if (threads <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < std::min(threads, n); ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(failure_mutex);
                    if (!failure) failure = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
}

}  // namespace

MethodRun run_method(MethodId method, const TrainedModels& models, const std::vector<Utterance>& test,
                     const std::vector<ConversionJob>& jobs, const BenchSettings& settings, std::uint64_t seed,
                     const std::vector<Generation>* reference) {
    MethodRun run;
    run.method = method;
    run.jobs = jobs;
    if (jobs.empty()) return run;
    if (!models.encoder || !models.classifier) throw ContractError("run_method needs an encoder and a classifier");
    for (const auto& j : jobs) {
        if (j.target == j.source_speaker) {
            throw ContractError("protocol error: target " + std::to_string(j.target) + " equals the source speaker");
        }
        if (j.source_index >= test.size()) throw ContractError("protocol error: source index out of range");
    }
    if (reference && reference->size() != jobs.size()) throw ContractError("reference outputs do not match jobs");

    const DecoderParams& decoder = decoder_for(method, models);
    run.outputs.resize(jobs.size());
    std::vector<double> pgd_norms(jobs.size(), 0.0);
    parallel_for(jobs.size(), settings.threads, [&](std::size_t i) {
        const ConversionJob& job = jobs[i];
        Rng rng(derive_seed(seed, "job:" + std::to_string(i)));
        Generation& out = run.outputs[i];
        out.frames = convert(decoder, *models.encoder, test[job.source_index].x, job.target, settings.reverse,
                             settings.schedule, rng);
        if (method == MethodId::direct_perturb) {
            const PgdResult r = pgd_attack(*models.classifier, out.frames, job.target, settings.pgd);
            pgd_norms[i] = perturbation_norm(r.delta, settings.pgd.norm);
            out.frames += r.delta;
            out.perturbation = r.delta;
        } else if (reference) {
            out.perturbation = out.frames - (*reference)[i].frames;
        } else {
            out.perturbation = Tensor::zeros(out.frames.shape());
        }
        out.prediction = predict_pooled(models.classifier->logits(out.frames));
    });
    if (method == MethodId::direct_perturb) {
        run.pgd_calls = jobs.size();
        run.max_pgd_norm = *std::max_element(pgd_norms.begin(), pgd_norms.end());
        if (run.max_pgd_norm > settings.pgd.epsilon) {
            throw ContractError("pgd perturbation norm exceeds budget during evaluation");
        }
    }
    return run;
}

double attack_success_rate(const std::vector<std::size_t>& predictions, const std::vector<std::size_t>& targets) {
    if (predictions.size() != targets.size()) {
        throw ShapeError("attack_success_rate: " + std::to_string(predictions.size()) + " predictions for " +
                         std::to_string(targets.size()) + " targets");
    }
    if (predictions.empty()) return 0.0;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i) hits += predictions[i] == targets[i];
    return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

namespace {

Eigen::MatrixXd to_eigen(const Tensor& t) {
    Eigen::MatrixXd m(t.rows(), t.cols());
    for (std::size_t i = 0; i < t.rows(); ++i)
        for (std::size_t j = 0; j < t.cols(); ++j) m(i, j) = t(i, j);
    return m;
}

void gaussian_fit(const Eigen::MatrixXd& x, double shrinkage, Eigen::VectorXd& mean, Eigen::MatrixXd& cov) {
    mean = x.colwise().mean().transpose();
    const Eigen::MatrixXd centered = x.rowwise() - mean.transpose();
    cov = centered.transpose() * centered / static_cast<double>(x.rows() - 1);
    cov += shrinkage * Eigen::MatrixXd::Identity(x.cols(), x.cols());
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
    const Eigen::VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_gaussian(const Tensor& a, const Tensor& b, double shrinkage) {
    if (a.cols() != b.cols()) throw ShapeError("frechet_gaussian: feature width mismatch");
    const std::size_t need = a.cols() + 1;
    if (a.rows() < need || b.rows() < need) {
        throw ContractError("frechet_gaussian needs at least " + std::to_string(need) + " frames per set, got " +
                            std::to_string(a.rows()) + " and " + std::to_string(b.rows()));
    }
    Eigen::VectorXd mu_a, mu_b;
    Eigen::MatrixXd cov_a, cov_b;
    gaussian_fit(to_eigen(a), shrinkage, mu_a, cov_a);
    gaussian_fit(to_eigen(b), shrinkage, mu_b, cov_b);
    // Tr((Sa Sb)^1/2) = Tr((Sa^1/2 Sb Sa^1/2)^1/2); the inner product is symmetric PSD.
    const Eigen::MatrixXd root_a = psd_sqrt(cov_a);
    const Eigen::MatrixXd inner = root_a * cov_b * root_a;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
    const double cross = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    const double d2 = (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    return std::max(d2, 0.0);
}

namespace {

Tensor gather_frames(const std::vector<const Tensor*>& parts) {
    if (parts.empty()) return {};
    std::size_t rows = 0;
    for (const Tensor* p : parts) rows += p->rows();
    const std::size_t d = parts.front()->cols();
    Tensor out({rows, d});
    std::size_t r = 0;
    for (const Tensor* p : parts)
        for (std::size_t i = 0; i < p->rows(); ++i, ++r) std::copy(p->row(i).begin(), p->row(i).end(), out.row(r).begin());
    return out;
}

// Mean of per-speaker distances between generated frames grouped by `key` and that speaker's real frames.
double grouped_frechet(const MethodRun& run, const Dataset& ds, bool by_target) {
    std::map<std::size_t, std::vector<const Tensor*>> generated, real;
    for (std::size_t i = 0; i < run.jobs.size(); ++i) {
        const auto& j = run.jobs[i];
        generated[by_target ? j.target : j.source_speaker].push_back(&run.outputs[i].frames);
    }
    for (const auto* part : {&ds.train, &ds.test})
        for (const auto& u : *part) real[u.speaker_id].push_back(&u.x);
    const std::size_t need = ds.world.feature_dim() + 1;
    double total = 0.0;
    std::size_t groups = 0;
    for (const auto& [spk, frames] : generated) {
        const Tensor g = gather_frames(frames);
        const Tensor r = gather_frames(real[spk]);
        if (g.rows() < need || r.rows() < need) continue;
        total += frechet_gaussian(g, r);
        ++groups;
    }
    return groups ? total / static_cast<double>(groups) : std::nan("");
}

}  // namespace

MethodSummary summarize(const MethodRun& run, const Dataset& ds, std::uint64_t seed) {
    MethodSummary s;
    s.method = run.method;
    s.seed = seed;
    s.n_samples = run.jobs.size();
    if (run.jobs.empty()) return s;
    std::vector<std::size_t> predictions, targets;
    double l2 = 0.0, linf = 0.0;
    for (std::size_t i = 0; i < run.jobs.size(); ++i) {
        predictions.push_back(run.outputs[i].prediction);
        targets.push_back(run.jobs[i].target);
        l2 += std::sqrt(squared_norm(run.outputs[i].perturbation.raw()));
        linf += max_abs(run.outputs[i].perturbation.raw());
    }
    const double n = static_cast<double>(run.jobs.size());
    s.acc = attack_success_rate(predictions, targets);
    s.mean_perturb_l2 = l2 / n;
    s.mean_perturb_linf = linf / n;
    s.frechet_to_target = grouped_frechet(run, ds, true);
    s.frechet_to_source = grouped_frechet(run, ds, false);
    return s;
}

const MethodSummary& EvalReport::row(MethodId m) const {
    for (const auto& r : rows)
        if (r.method == m) return r;
    throw ContractError("report has no row for " + method_name(m));
}

EvalReport build_report(std::vector<MethodSummary> rows, nlohmann::json metadata) {
    EvalReport report;
    report.metadata = std::move(metadata);
    for (MethodId m : kAllMethods) {
        const auto count = std::count_if(rows.begin(), rows.end(), [m](const auto& r) { return r.method == m; });
        if (count != 1) {
            throw ContractError("report needs exactly one row for " + method_name(m) + ", got " +
                                std::to_string(count));
        }
        report.rows.push_back(*std::find_if(rows.begin(), rows.end(), [m](const auto& r) { return r.method == m; }));
    }
    if (rows.size() != report.rows.size()) throw ContractError("report has rows for unknown methods");
    return report;
}

namespace {

constexpr const char* kCsvHeader =
    "method,seed,n_samples,acc,mean_perturb_l2,mean_perturb_linf,frechet_to_target,frechet_to_source";

std::string table_name(MethodId m) {
    switch (m) {
        case MethodId::vanilla: return "Vanilla";
        case MethodId::direct_perturb: return "Direct perturbation (upper limit)";
        case MethodId::spk_constraint: return "Speaker constraint";
        case MethodId::adv_constraint: return "Adversarial constraint";
    }
    return "?";
}

std::string fixed(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

}  // namespace

std::string report_csv(const EvalReport& report) {
    std::string out = std::string(kCsvHeader) + "\n";
    for (const auto& r : report.rows) {
        out += method_name(r.method) + "," + std::to_string(r.seed) + "," + std::to_string(r.n_samples) + "," +
               format_double(r.acc) + "," + format_double(r.mean_perturb_l2) + "," +
               format_double(r.mean_perturb_linf) + "," + format_double(r.frechet_to_target) + "," +
               format_double(r.frechet_to_source) + "\n";
    }
    return out;
}

EvalReport parse_report_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != kCsvHeader) throw FormatError("report csv: unexpected header");
    std::vector<MethodSummary> rows;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (cells.size() != 8) throw FormatError("report csv line " + std::to_string(line_no) + ": expected 8 columns");
        try {
            MethodSummary r;
            r.method = parse_method(cells[0]);
            r.seed = std::stoull(cells[1]);
            r.n_samples = std::stoull(cells[2]);
            r.acc = std::stod(cells[3]);
            r.mean_perturb_l2 = std::stod(cells[4]);
            r.mean_perturb_linf = std::stod(cells[5]);
            r.frechet_to_target = std::stod(cells[6]);
            r.frechet_to_source = std::stod(cells[7]);
            rows.push_back(r);
        } catch (const std::invalid_argument&) {
            throw FormatError("report csv line " + std::to_string(line_no) + ": malformed number");
        }
    }
    return build_report(std::move(rows));
}

std::string report_markdown(const EvalReport& report) {
    std::string out =
        "| Method | Acc (%) | mean ‖δ‖₂ | mean ‖δ‖∞ | Fréchet to target | Fréchet to source |\n"
        "|---|---|---|---|---|---|\n";
    for (const auto& r : report.rows) {
        out += "| " + table_name(r.method) + " | " + fixed(100.0 * r.acc, 2) + " | " + fixed(r.mean_perturb_l2, 4) +
               " | " + fixed(r.mean_perturb_linf, 4) + " | " + fixed(r.frechet_to_target, 4) + " | " +
               fixed(r.frechet_to_source, 4) + " |\n";
    }
    const double gap = report.row(MethodId::adv_constraint).acc - report.row(MethodId::vanilla).acc;
    out += "\nAdversarial constraint vs vanilla: " + fixed(100.0 * gap, 2) + " percentage points.\n";
    return out;
}

}  // namespace diffattack
