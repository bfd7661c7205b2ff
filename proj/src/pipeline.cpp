#include "fpcnn/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "fpcnn/error.hpp"
#include "fpcnn/rng.hpp"

namespace fpcnn::pipeline {

namespace {

constexpr std::uint64_t kSplitStream = 11;
constexpr std::uint64_t kInitStream = 12;
constexpr std::uint64_t kShuffleStream = 13;
constexpr std::uint64_t kAugmentStream = 14;
constexpr std::uint64_t kBalanceTrainStream = 15;
constexpr std::uint64_t kBalanceValStream = 16;
constexpr std::uint64_t kBalanceTestStream = 17;

bool mask_has_voxels(const imgvol::Volume3D& mask) {
  for (double v : mask.data()) {
    if (v != 0.0) return true;
  }
  return false;
}

}  // namespace

GeneratedSource::GeneratedSource(std::size_t n_subjects,
                                 std::size_t n_lesioned,
                                 const phantom::PhantomParams& params)
    : params_(params) {
  if (n_lesioned > n_subjects) {
    fail(ErrorCode::invalid_argument, "more lesioned subjects than subjects");
  }
  entries_.reserve(n_subjects);
  lesioned_.reserve(n_subjects);
  for (std::size_t s = 0; s < n_subjects; ++s) {
    char id[32];
    std::snprintf(id, sizeof id, "s%03zu", s);
    entries_.push_back({id, s < n_lesioned, derive_seed(params.seed, s)});
    lesioned_.push_back(s < n_lesioned);
  }
}

std::vector<phantom::ManifestEntry> GeneratedSource::manifest() const {
  return entries_;
}

phantom::PhantomSubject GeneratedSource::load(
    const std::string& subject_id) const {
  for (std::size_t s = 0; s < entries_.size(); ++s) {
    if (entries_[s].subject_id != subject_id) continue;
    return phantom::generate_corpus_subject(params_, s, lesioned_[s]);
  }
  fail(ErrorCode::invalid_argument, "unknown subject: " + subject_id);
}

MemorySource::MemorySource(std::vector<phantom::PhantomSubject> subjects)
    : subjects_(std::move(subjects)) {}

std::vector<phantom::ManifestEntry> MemorySource::manifest() const {
  std::vector<phantom::ManifestEntry> entries;
  entries.reserve(subjects_.size());
  for (const phantom::PhantomSubject& s : subjects_) {
    entries.push_back({s.subject_id, s.has_lesion, s.seed});
  }
  return entries;
}

phantom::PhantomSubject MemorySource::load(const std::string& subject_id) const {
  for (const phantom::PhantomSubject& s : subjects_) {
    if (s.subject_id == subject_id) return s;
  }
  fail(ErrorCode::invalid_argument, "unknown subject: " + subject_id);
}

DirectorySource::DirectorySource(const std::string& dir) : dir_(dir) {
  entries_ = phantom::read_manifest(
      (std::filesystem::path(dir) / "manifest.csv").string());
}

std::vector<phantom::ManifestEntry> DirectorySource::manifest() const {
  return entries_;
}

phantom::PhantomSubject DirectorySource::load(
    const std::string& subject_id) const {
  for (const phantom::ManifestEntry& e : entries_) {
    if (e.subject_id != subject_id) continue;
    const std::string base =
        (std::filesystem::path(dir_) / subject_id).string();
    phantom::PhantomSubject s;
    s.subject_id = subject_id;
    s.seed = e.seed;
    s.has_lesion = e.has_lesion;
    s.cine = imgvol::load_volume(base + "_cine.fvol");
    s.myo_mask = imgvol::load_volume(base + "_myo.fvol");
    s.lesion_mask = imgvol::load_volume(base + "_lesion.fvol");
    if (s.has_lesion != mask_has_voxels(s.lesion_mask)) {
      fail(ErrorCode::pipeline_error,
           "manifest lesion flag contradicts the mask for " + subject_id);
    }
    return s;
  }
  fail(ErrorCode::invalid_argument, "unknown subject: " + subject_id);
}

namespace {

void validate_train_config(const TrainConfig& cfg) {
  if (cfg.batch_size == 0 || cfg.max_epochs == 0 || !(cfg.lr > 0.0)) {
    fail(ErrorCode::invalid_argument, "batch size, epochs and lr must be positive");
  }
}

patches::PatchSet extract_split(const SubjectSource& source,
                                const std::vector<std::string>& ids,
                                const std::string& name,
                                const TrainConfig& cfg) {
  patches::ExtractConfig ex{cfg.patch_size, cfg.stride, cfg.coverage_min,
                            cfg.label_min};
  patches::PatchSet set;
  set.patch_size = cfg.patch_size;
  set.split = name;
  for (const std::string& id : ids) {
    const phantom::PhantomSubject subject = source.load(id);
    const patches::SubjectStats stats =
        patches::subject_stats(id, subject.cine, subject.myo_mask);
    const auto index = static_cast<std::uint32_t>(set.subjects.size());
    set.subjects.push_back(stats);
    std::vector<patches::Patch> extracted = patches::extract_subject_patches(
        subject.cine, subject.myo_mask, subject.lesion_mask, index, stats, ex);
    for (patches::Patch& p : extracted) set.patches.push_back(std::move(p));
  }
  return set;
}

}  // namespace

DataBundle prepare_data(const SubjectSource& source, const TrainConfig& cfg) {
  validate_train_config(cfg);
  const auto entries = source.manifest();
  DataBundle bundle;
  bundle.split =
      patches::stratified_split(entries, cfg.train_frac, cfg.val_frac,
                                cfg.test_frac, derive_seed(cfg.seed, kSplitStream));
  bundle.train = extract_split(source, bundle.split.train, "train", cfg);
  bundle.val = extract_split(source, bundle.split.val, "val", cfg);
  bundle.test = extract_split(source, bundle.split.test, "test", cfg);
  bundle.n_extracted = bundle.train.patches.size() +
                       bundle.val.patches.size() + bundle.test.patches.size();
  patches::normalize_pixels(bundle.train);
  patches::normalize_pixels(bundle.val);
  patches::normalize_pixels(bundle.test);
  patches::balance_patches(bundle.train,
                           derive_seed(cfg.seed, kBalanceTrainStream));
  patches::balance_patches(bundle.val, derive_seed(cfg.seed, kBalanceValStream));
  const auto test_labels = patches::label_counts(bundle.test);
  if (test_labels[0] > 0 && test_labels[1] > 0) {
    patches::balance_patches(bundle.test,
                             derive_seed(cfg.seed, kBalanceTestStream));
  }
  return bundle;
}

EvalMetrics evaluate_patches(const nn::Model& model,
                             const patches::PatchSet& set) {
  if (set.patches.empty()) {
    fail(ErrorCode::empty_dataset, "no patches to evaluate");
  }
  EvalMetrics m;
  m.count = set.patches.size();
  std::size_t correct = 0;
  double loss = 0.0;
  for (const patches::Patch& p : set.patches) {
    const double prob = model.predict(p.pixels, p.pos);
    loss += nn::bce_loss(prob, p.label);
    const bool called = prob >= 0.5;
    if (called == (p.label != 0)) ++correct;
  }
  m.accuracy = static_cast<double>(correct) / static_cast<double>(m.count);
  m.loss = loss / static_cast<double>(m.count);
  return m;
}

TrainResult train_model(const DataBundle& data, const TrainConfig& cfg) {
  validate_train_config(cfg);
  if (data.train.patches.empty() || data.val.patches.empty()) {
    fail(ErrorCode::empty_dataset, "training needs non-empty train and val sets");
  }
  if (!data.train.normalized || !data.val.normalized) {
    fail(ErrorCode::invalid_argument, "train on normalized patches only");
  }
  if (data.train.patch_size != cfg.patch_size ||
      data.val.patch_size != cfg.patch_size) {
    fail(ErrorCode::invalid_argument, "patch size differs between data and config");
  }

  const nn::ModelConfig mc{cfg.patch_size, cfg.conv1_channels,
                           cfg.conv2_channels, cfg.hidden_units,
                           cfg.use_position};
  nn::Model model(mc, derive_seed(cfg.seed, kInitStream));
  const nn::AdamConfig adam{cfg.lr, 0.9, 0.999, 1e-8};

  TrainResult result{model, {}, 0, -1.0};
  const std::uint64_t shuffle_base = derive_seed(cfg.seed, kShuffleStream);
  const std::uint64_t augment_base = derive_seed(cfg.seed, kAugmentStream);
  const std::size_t n = data.train.patches.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    SplitMix64 shuffle_rng(derive_seed(shuffle_base, epoch));
    SplitMix64 augment_rng(derive_seed(augment_base, epoch));
    shuffle(order, shuffle_rng);

    double train_loss = 0.0;
    std::size_t train_correct = 0;
    std::size_t done = 0;
    while (done < n) {
      const std::size_t batch = std::min(cfg.batch_size, n - done);
      model.zero_gradients();
      for (std::size_t b = 0; b < batch; ++b) {
        const patches::Patch& src = data.train.patches[order[done + b]];
        double prob = 0.0;
        if (cfg.augment) {
          const int g = static_cast<int>(augment_rng.next_below(8));
          if (g != 0) {
            const patches::Patch aug =
                patches::augment_patch(src, g, cfg.patch_size);
            prob = model.accumulate_gradient(aug.pixels, aug.pos, aug.label);
          } else {
            prob = model.accumulate_gradient(src.pixels, src.pos, src.label);
          }
        } else {
          prob = model.accumulate_gradient(src.pixels, src.pos, src.label);
        }
        train_loss += nn::bce_loss(prob, src.label);
        if ((prob >= 0.5) == (src.label != 0)) ++train_correct;
      }
      model.scale_gradients(1.0 / static_cast<double>(batch));
      model.adam_step(adam);
      done += batch;
    }

    const EvalMetrics val = evaluate_patches(model, data.val);
    result.metrics.push_back({epoch, "train",
                              static_cast<double>(train_correct) /
                                  static_cast<double>(n),
                              train_loss / static_cast<double>(n)});
    result.metrics.push_back({epoch, "val", val.accuracy, val.loss});

    if (val.accuracy > result.best_val_accuracy) {
      result.best_val_accuracy = val.accuracy;
      result.best_epoch = epoch;
      result.model = model;
    }
    if (epoch - result.best_epoch >= cfg.patience) break;
  }
  return result;
}

DamageMap damage_map(const nn::Model& model, const imgvol::Volume3D& cine,
                     const imgvol::Volume3D& myo,
                     const patches::SubjectStats& stats, double coverage_min) {
  const auto& g = cine.geometry();
  const std::size_t p = model.config().patch_size;
  const std::size_t h = (p - 1) / 2;
  patches::ExtractConfig ex{p, 1, coverage_min, 0.5};

  patches::PatchSet dense;
  dense.patch_size = p;
  dense.split = "dense";
  dense.subjects.push_back(stats);
  dense.patches = patches::extract_subject_patches(
      cine, myo, imgvol::Volume3D::zeros(g), 0, stats, ex);
  patches::normalize_pixels(dense);

  imgvol::Volume3D sum = imgvol::Volume3D::zeros(g);
  std::vector<std::uint32_t> cnt(cine.size(), 0);
  for (const patches::Patch& patch : dense.patches) {
    const double prob = model.predict(patch.pixels, patch.pos);
    const auto ci = static_cast<std::size_t>(patch.ci);
    const auto cj = static_cast<std::size_t>(patch.cj);
    const std::size_t k = patch.slice_index;
    for (std::size_t r = 0; r < p; ++r) {
      for (std::size_t c = 0; c < p; ++c) {
        const std::size_t at = cine.index(ci - h + c, cj - h + r, k);
        sum.data()[at] += prob;
        ++cnt[at];
      }
    }
  }

  DamageMap out;
  out.map = imgvol::Volume3D::zeros(g);
  double myo_sum = 0.0;
  std::size_t myo_n = 0;
  const std::size_t nx = g.dims[0], ny = g.dims[1];
  std::vector<std::size_t> covered;
  for (std::size_t k = 0; k < g.dims[2]; ++k) {
    covered.clear();
    for (std::size_t j = 0; j < ny; ++j) {
      for (std::size_t i = 0; i < nx; ++i) {
        if (cnt[cine.index(i, j, k)] > 0) covered.push_back(i + nx * j);
      }
    }
    for (std::size_t j = 0; j < ny; ++j) {
      for (std::size_t i = 0; i < nx; ++i) {
        const std::size_t at = cine.index(i, j, k);
        if (myo.data()[at] == 0.0) continue;
        double value = 0.0;
        if (cnt[at] > 0) {
          value = sum.data()[at] / static_cast<double>(cnt[at]);
        } else if (!covered.empty()) {
          // nearest covered voxel in this slice; first winner on ties
          std::size_t best = covered.front();
          std::size_t best_d2 = std::numeric_limits<std::size_t>::max();
          for (std::size_t cc : covered) {
            const std::size_t cx = cc % nx, cy = cc / nx;
            const std::size_t dx = cx > i ? cx - i : i - cx;
            const std::size_t dy = cy > j ? cy - j : j - cy;
            const std::size_t d2 = dx * dx + dy * dy;
            if (d2 < best_d2) {
              best_d2 = d2;
              best = cc;
            }
          }
          const std::size_t src = cine.index(best % nx, best / nx, k);
          value = sum.data()[src] / static_cast<double>(cnt[src]);
        }
        out.map.data()[at] = value;
        myo_sum += value;
        ++myo_n;
      }
    }
  }
  if (myo_n == 0) fail(ErrorCode::empty_mask, "no myocardium voxels to score");
  out.mean_score = myo_sum / static_cast<double>(myo_n);
  out.decision = out.mean_score > 0.5;
  return out;
}

std::vector<SubjectEval> evaluate_subjects(const nn::Model& model,
                                           const SubjectSource& source,
                                           const std::vector<std::string>& ids,
                                           double coverage_min) {
  std::vector<SubjectEval> rows;
  rows.reserve(ids.size());
  for (const std::string& id : ids) {
    const phantom::PhantomSubject subject = source.load(id);
    const patches::SubjectStats stats =
        patches::subject_stats(id, subject.cine, subject.myo_mask);
    const DamageMap dm =
        damage_map(model, subject.cine, subject.myo_mask, stats, coverage_min);
    rows.push_back({id, subject.has_lesion, dm.mean_score, dm.decision});
  }
  return rows;
}

std::vector<SweepRow> sweep_patch_sizes(const SubjectSource& source,
                                        const TrainConfig& base,
                                        const std::vector<std::size_t>& sizes) {
  if (sizes.empty()) fail(ErrorCode::invalid_argument, "no patch sizes given");
  std::vector<SweepRow> rows;
  rows.reserve(sizes.size());
  for (std::size_t p : sizes) {
    TrainConfig cfg = base;
    cfg.patch_size = p;
    cfg.stride = p;
    const DataBundle bundle = prepare_data(source, cfg);
    const TrainResult result = train_model(bundle, cfg);
    rows.push_back({p, bundle.n_extracted, result.best_val_accuracy});
  }
  return rows;
}

void write_metrics_csv(const std::vector<EpochRow>& rows,
                       const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::io_failure, "cannot open for write: " + path);
  out << "epoch,split,accuracy,loss\n";
  char buf[96];
  for (const EpochRow& r : rows) {
    if (r.split.empty() || r.split.find(',') != std::string::npos) {
      fail(ErrorCode::invalid_argument, "bad split tag in metrics row");
    }
    std::snprintf(buf, sizeof buf, ",%.17g,%.17g\n", r.accuracy, r.loss);
    out << r.epoch << ',' << r.split << buf;
  }
  if (!out.flush()) fail(ErrorCode::io_failure, "write failed: " + path);
}

std::vector<EpochRow> read_metrics_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::file_not_found, "cannot open: " + path);
  std::string line;
  if (!std::getline(in, line) || line != "epoch,split,accuracy,loss") {
    fail(ErrorCode::malformed_header, "bad metrics header in " + path);
  }
  std::vector<EpochRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    EpochRow r;
    std::string epoch, acc, loss;
    if (!std::getline(ss, epoch, ',') || !std::getline(ss, r.split, ',') ||
        !std::getline(ss, acc, ',') || !std::getline(ss, loss)) {
      fail(ErrorCode::malformed_header, "bad metrics row: " + line);
    }
    try {
      std::size_t used = 0;
      r.epoch = std::stoull(epoch, &used);
      if (used != epoch.size()) throw std::invalid_argument(epoch);
      r.accuracy = std::stod(acc, &used);
      if (used != acc.size()) throw std::invalid_argument(acc);
      r.loss = std::stod(loss, &used);
      if (used != loss.size()) throw std::invalid_argument(loss);
    } catch (const std::exception&) {
      fail(ErrorCode::malformed_header, "bad metrics row: " + line);
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

void write_damage_pgms(const imgvol::Volume3D& map, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const auto& g = map.geometry();
  for (std::size_t k = 0; k < g.dims[2]; ++k) {
    char name[48];
    std::snprintf(name, sizeof name, "damage_slice_%03zu.pgm", k);
    std::ofstream out(fs::path(dir) / name, std::ios::binary);
    if (!out) fail(ErrorCode::io_failure, "cannot open for write: " + dir);
    out << "P5\n" << g.dims[0] << ' ' << g.dims[1] << "\n255\n";
    for (std::size_t j = 0; j < g.dims[1]; ++j) {
      for (std::size_t i = 0; i < g.dims[0]; ++i) {
        const double v = std::clamp(map.at(i, j, k), 0.0, 1.0);
        out.put(static_cast<char>(
            static_cast<int>(std::floor(v * 255.0 + 0.5))));
      }
    }
    if (!out.flush()) fail(ErrorCode::io_failure, "write failed: " + dir);
  }
}

}  // namespace fpcnn::pipeline
