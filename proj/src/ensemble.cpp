#include "dpe/ensemble.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <functional>
#include <future>
#include <iostream>
#include <numeric>
#include <random>

#include "dpe/errors.hpp"

namespace dpe {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) {
    std::uint64_t x = seed ^ (0x9e3779b97f4a7c15ULL + salt);
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

Dpe make_dpe(const std::vector<LayerSpec>& arch, int ensemble_size, double beta,
             std::uint64_t seed, double l2_coeff) {
    if (ensemble_size < 2) throw ConfigError("ensemble: E must be >= 2");
    if (ensemble_size == 2)
        std::cerr << "warning: E=2 ensembles risk exploding KL gradients; E >= 4 recommended\n";
    Dpe dpe;
    dpe.beta = beta;
    dpe.l2_coeff = l2_coeff;
    for (int e = 0; e < ensemble_size; ++e) {
        dpe.members.emplace_back(arch);
        he_initialize(dpe.members.back(), derive_seed(seed, std::uint64_t(e)));
    }
    return dpe;
}

EarlyStopper::EarlyStopper(int patience, double lr_drop, double lr0)
    : patience_(patience), lr_drop_(lr_drop), lr_(lr0) {
    if (patience < 1) throw ConfigError("early stopping: patience must be >= 1");
    if (lr_drop <= 0.0 || lr_drop >= 1.0) throw ConfigError("early stopping: lr_drop in (0,1)");
}

bool EarlyStopper::observe(double val_metric) {
    if (val_metric > best_) {
        best_ = val_metric;
        stall_ = 0;
        improved_last_ = true;
        return true;
    }
    improved_last_ = false;
    ++stall_;
    if (!dropped_) {
        if (stall_ >= patience_) {
            lr_ *= lr_drop_;
            dropped_ = true;
            stall_ = 0;
        }
        return true;
    }
    return stall_ < 2 * patience_;
}

std::vector<std::uint32_t> epoch_shuffle(std::uint64_t seed, int epoch, std::size_t n) {
    std::vector<std::uint32_t> order(n);
    std::iota(order.begin(), order.end(), 0u);
    std::mt19937_64 rng(derive_seed(seed, 0xE70C000000000000ULL + std::uint64_t(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    return order;
}

namespace {

struct Snapshot {
    std::vector<std::vector<Tensor>> params;
    std::vector<std::vector<Tensor>> buffers;
};

Snapshot take_snapshot(const Dpe& dpe) {
    Snapshot s;
    for (const Network& m : dpe.members) {
        s.params.push_back(m.params());
        s.buffers.push_back(m.buffers());
    }
    return s;
}

void restore_snapshot(Dpe& dpe, const Snapshot& s) {
    for (std::size_t e = 0; e < dpe.members.size(); ++e) {
        dpe.members[e].params() = s.params[e];
        dpe.members[e].buffers() = s.buffers[e];
    }
}

// Runs fn(e) for all members, on up to `threads` workers when threads > 0.
void for_each_member(std::size_t count, int threads, const std::function<void(std::size_t)>& fn) {
    if (threads <= 0) {
        for (std::size_t e = 0; e < count; ++e) fn(e);
        return;
    }
    std::vector<std::future<void>> futs;
    for (std::size_t e = 0; e < count; ++e)
        futs.push_back(std::async(std::launch::async, fn, e));
    for (auto& f : futs) f.get();
}

}  // namespace

TrainResult train(Dpe& dpe, const Dataset& labeled, const Dataset& val,
                  const TrainConfig& cfg) {
    if (labeled.size() == 0) throw ConfigError("train: labeled set is empty");
    if (val.size() == 0)
        throw ConfigError("train: early stopping needs a nonempty validation set");
    if (cfg.batch_size < 1) throw ConfigError("train: batch size must be >= 1");
    const std::size_t E = dpe.members.size();
    if (E == 0) throw ConfigError("train: ensemble has no members");

    std::vector<ParameterGroup> groups;
    if (dpe.beta > 0.0) groups = build_groups(dpe.members);

    std::vector<SgdState> states;
    for (Network& m : dpe.members) states.push_back(SgdState::make(m, cfg.lr0, cfg.momentum));

    EarlyStopper stopper(cfg.patience, cfg.lr_drop, cfg.lr0);
    TrainResult result;
    Snapshot best = take_snapshot(dpe);

    const std::size_t n = labeled.size();
    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        const std::vector<std::uint32_t> order = epoch_shuffle(cfg.seed, epoch, n);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < n; start += std::size_t(cfg.batch_size)) {
            const std::size_t stop = std::min(n, start + std::size_t(cfg.batch_size));
            std::vector<std::uint32_t> idx(order.begin() + start, order.begin() + stop);

            Tensor batch;
            if (cfg.augment) {
                AugmentedBatch aug = augment(labeled, idx, cfg.augment_policy,
                                             derive_seed(cfg.seed, (std::uint64_t(epoch) << 32) | batches));
                batch = make_batch(aug.inputs);
            } else {
                batch = make_batch(labeled, idx);
            }
            std::vector<int> targets;
            targets.reserve(idx.size());
            for (std::uint32_t i : idx) targets.push_back(labeled.labels.at(i));

            std::vector<std::vector<Tensor>> grads(E);
            std::vector<double> losses(E, 0.0);
            for_each_member(E, cfg.threads, [&](std::size_t e) {
                const Tensor probs = dpe.members[e].forward(batch, true);
                LossResult ce = cross_entropy(probs, targets);
                losses[e] = ce.loss;
                grads[e] = dpe.members[e].backward(ce.grad).params;
            });
            // synchronization point: the KL penalty sees all members' current
            // parameters before any of them steps
            if (dpe.beta > 0.0) {
                for (std::size_t p = 0; p < groups.size(); ++p) {
                    std::vector<Tensor*> outs;
                    outs.reserve(E);
                    for (std::size_t e = 0; e < E; ++e) outs.push_back(&grads[e][p]);
                    accumulate_layer_penalty_grad(groups[p], outs, dpe.beta);
                }
            }
            if (dpe.l2_coeff > 0.0) {
                for (std::size_t e = 0; e < E; ++e) {
                    const auto& params = dpe.members[e].params();
                    for (std::size_t p = 0; p < params.size(); ++p)
                        for (std::size_t j = 0; j < params[p].numel(); ++j)
                            grads[e][p][j] += 2.0 * dpe.l2_coeff * params[p][j];
                }
            }
            for (std::size_t e = 0; e < E; ++e) sgd_step(dpe.members[e], grads[e], states[e]);
            for (double l : losses) loss_sum += l;
            ++batches;
        }

        const double val_acc = evaluate_accuracy(dpe, val, 64, cfg.threads);
        const bool keep_going = stopper.observe(val_acc);
        if (stopper.improved_last()) {
            best = take_snapshot(dpe);
            result.best_epoch = epoch;
            result.best_val_accuracy = val_acc;
        }
        for (SgdState& s : states) s.learning_rate = stopper.learning_rate();
        result.log.push_back({epoch, loss_sum / double(batches * E), val_acc,
                              stopper.learning_rate()});
        result.epochs_run = epoch;
        if (!keep_going) break;
    }

    restore_snapshot(dpe, best);
    return result;
}

Prediction predict(const Dpe& dpe, const Tensor& batch) {
    if (dpe.members.empty()) throw ConfigError("predict: ensemble has no members");
    Prediction pred;
    for (const Network& m : dpe.members) {
        // eval-mode forward is const in all but the cache
        pred.member_probs.push_back(const_cast<Network&>(m).forward(batch, false));
    }
    pred.mean = Tensor::zeros_like(pred.member_probs[0]);
    for (const Tensor& p : pred.member_probs)
        for (std::size_t j = 0; j < p.numel(); ++j) pred.mean[j] += p[j];
    for (double& v : pred.mean.vec()) v /= double(dpe.members.size());
    return pred;
}

double evaluate_accuracy(const Dpe& dpe, const Dataset& ds, int batch_size, int threads) {
    (void)threads;
    if (ds.size() == 0) throw ConfigError("evaluate_accuracy: empty dataset");
    std::size_t correct = 0;
    for (std::size_t start = 0; start < ds.size(); start += std::size_t(batch_size)) {
        const std::size_t stop = std::min(ds.size(), start + std::size_t(batch_size));
        std::vector<std::uint32_t> idx;
        for (std::size_t i = start; i < stop; ++i) idx.push_back(std::uint32_t(i));
        const Prediction pred = predict(dpe, make_batch(ds, idx));
        const std::size_t K = pred.mean.dim(1);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            std::size_t best = 0;
            for (std::size_t k = 1; k < K; ++k)
                if (pred.mean.at2(i, k) > pred.mean.at2(i, best)) best = k;
            if (int(best) == ds.labels[idx[i]]) ++correct;
        }
    }
    return double(correct) / double(ds.size());
}

namespace {

constexpr char kMagic[4] = {'D', 'P', 'E', '1'};
constexpr std::uint32_t kVersion = 1;

void write_u16(std::ostream& out, std::uint16_t v) {
    const unsigned char b[2] = {(unsigned char)(v & 0xff), (unsigned char)(v >> 8)};
    out.write(reinterpret_cast<const char*>(b), 2);
}

void write_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = (unsigned char)((v >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(b), 4);
}

void write_f32(std::ostream& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    write_u32(out, bits);
}

std::uint16_t read_u16(std::istream& in, const std::string& path) {
    unsigned char b[2];
    in.read(reinterpret_cast<char*>(b), 2);
    if (!in) throw FormatError("corrupt checkpoint " + path + ": truncated");
    return std::uint16_t(b[0]) | (std::uint16_t(b[1]) << 8);
}

std::uint32_t read_u32(std::istream& in, const std::string& path) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw FormatError("corrupt checkpoint " + path + ": truncated");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(b[i]) << (8 * i);
    return v;
}

float read_f32(std::istream& in, const std::string& path) {
    const std::uint32_t bits = read_u32(in, path);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

// Writes one group: the tensor at the same slot across all members.
void write_group(std::ostream& out, const std::string& name, ParamRole role,
                 const Tensor& shape_ref, const std::vector<const Tensor*>& members) {
    if (name.size() > 0xffff) throw ConfigError("checkpoint: group name too long");
    write_u16(out, std::uint16_t(name.size()));
    out.write(name.data(), std::streamsize(name.size()));
    out.put(char(std::uint8_t(role)));
    out.put(char(std::uint8_t(shape_ref.ndim())));
    for (std::size_t d : shape_ref.shape()) write_u32(out, std::uint32_t(d));
    for (const Tensor* t : members)
        for (double v : t->vec()) write_f32(out, float(v));
}

}  // namespace

void save(const Dpe& dpe, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError(path + ": cannot open for writing");
    out.write(kMagic, 4);
    write_u32(out, kVersion);
    write_u32(out, std::uint32_t(dpe.members.size()));
    const Network& head = dpe.members[0];
    write_u32(out, std::uint32_t(head.param_infos().size() + head.buffer_infos().size()));
    for (std::size_t p = 0; p < head.param_infos().size(); ++p) {
        std::vector<const Tensor*> members;
        for (const Network& m : dpe.members) members.push_back(&m.params()[p]);
        write_group(out, head.param_infos()[p].name, head.param_infos()[p].role,
                    head.params()[p], members);
    }
    for (std::size_t b = 0; b < head.buffer_infos().size(); ++b) {
        std::vector<const Tensor*> members;
        for (const Network& m : dpe.members) members.push_back(&m.buffers()[b]);
        write_group(out, head.buffer_infos()[b].name, head.buffer_infos()[b].role,
                    head.buffers()[b], members);
    }
    if (!out) throw FormatError(path + ": write failed");
}

Dpe load(const std::string& path, const std::vector<LayerSpec>& arch) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError(path + ": cannot open");
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0)
        throw FormatError("corrupt checkpoint " + path + ": bad magic");
    if (read_u32(in, path) != kVersion)
        throw FormatError("corrupt checkpoint " + path + ": unsupported version");
    const std::uint32_t E = read_u32(in, path);
    if (E < 2) throw FormatError("corrupt checkpoint " + path + ": E < 2");
    const std::uint32_t group_count = read_u32(in, path);

    Dpe dpe;
    for (std::uint32_t e = 0; e < E; ++e) dpe.members.emplace_back(arch);
    const Network& head = dpe.members[0];
    const std::size_t expected =
        head.param_infos().size() + head.buffer_infos().size();
    if (group_count != expected)
        throw FormatError("corrupt checkpoint " + path + ": group count " +
                          std::to_string(group_count) + " does not match architecture (" +
                          std::to_string(expected) + ")");

    for (std::uint32_t g = 0; g < group_count; ++g) {
        const std::uint16_t name_len = read_u16(in, path);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        if (!in) throw FormatError("corrupt checkpoint " + path + ": truncated");
        const int role = in.get();
        const int rank = in.get();
        if (role == EOF || rank == EOF)
            throw FormatError("corrupt checkpoint " + path + ": truncated");
        std::vector<std::size_t> dims;
        for (int d = 0; d < rank; ++d) dims.push_back(read_u32(in, path));

        // locate the slot by name
        int pslot = -1, bslot = -1;
        for (std::size_t p = 0; p < head.param_infos().size(); ++p)
            if (head.param_infos()[p].name == name) pslot = int(p);
        for (std::size_t b = 0; b < head.buffer_infos().size(); ++b)
            if (head.buffer_infos()[b].name == name) bslot = int(b);
        if (pslot < 0 && bslot < 0)
            throw FormatError("corrupt checkpoint " + path + ": unknown group '" + name + "'");
        Tensor& ref = pslot >= 0 ? dpe.members[0].params()[pslot]
                                 : dpe.members[0].buffers()[bslot];
        if (dims != ref.shape())
            throw FormatError("corrupt checkpoint " + path + ": shape mismatch for '" +
                              name + "'");
        for (std::uint32_t e = 0; e < E; ++e) {
            Tensor& dst = pslot >= 0 ? dpe.members[e].params()[pslot]
                                     : dpe.members[e].buffers()[bslot];
            for (std::size_t j = 0; j < dst.numel(); ++j) dst[j] = double(read_f32(in, path));
        }
    }
    // trailing bytes mean the writer and reader disagree
    if (in.peek() != EOF)
        throw FormatError("corrupt checkpoint " + path + ": trailing bytes");
    return dpe;
}

}  // namespace dpe
