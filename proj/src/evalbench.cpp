#include "crfill/evalbench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "crfill/metrics.hpp"

namespace crfill {

const MetricsRow& MetricsRecord::overall() const {
  if (rows.empty()) throw std::logic_error("metrics record is empty");
  return rows.back();
}

const MetricsRow* MetricsRecord::group(const std::string& name) const {
  for (const auto& r : rows) {
    if (r.group == name) return &r;
  }
  return nullptr;
}

SampleMetrics measure(const Tensor<float>& result, const Tensor<float>& truth, const Tensor<float>& mask) {
  const Tensor<float> a = to_unit_range(result), b = to_unit_range(truth);
  SampleMetrics m;
  m.l1 = l1_error(a, b);
  m.psnr = psnr(a, b);
  m.ssim = ssim(a, b);
  m.l1_hole = l1_error_masked(a, b, mask);
  m.psnr_hole = psnr_masked(a, b, mask);
  return m;
}

MetricsRecord summarize(std::vector<SampleMetrics> samples) {
  if (samples.empty()) throw std::invalid_argument("no samples to summarize");
  MetricsRecord rec;
  rec.samples = std::move(samples);
  auto row_of = [](const std::string& name, const std::vector<const SampleMetrics*>& items) {
    MetricsRow r;
    r.group = name;
    r.count = static_cast<int>(items.size());
    for (const auto* s : items) {
      r.l1 += s->l1;
      r.psnr += s->psnr;
      r.ssim += s->ssim;
      r.l1_hole += s->l1_hole;
      r.psnr_hole += s->psnr_hole;
    }
    const double n = static_cast<double>(items.size());
    r.l1 /= n;
    r.psnr /= n;
    r.ssim /= n;
    r.l1_hole /= n;
    r.psnr_hole /= n;
    return r;
  };
  std::vector<const SampleMetrics*> all;
  for (MaskKind kind : {MaskKind::kSquare, MaskKind::kIrregular, MaskKind::kBlob}) {
    std::vector<const SampleMetrics*> items;
    for (const auto& s : rec.samples) {
      if (s.kind == kind) items.push_back(&s);
    }
    if (!items.empty()) rec.rows.push_back(row_of(to_string(kind), items));
  }
  for (const auto& s : rec.samples) all.push_back(&s);
  rec.rows.push_back(row_of("all", all));
  return rec;
}

DatasetSpec held_out_spec(const DatasetSpec& spec) {
  DatasetSpec out = spec;
  out.split_seed = derive_seed(spec.split_seed, 0x4e1d07);
  return out;
}

Sample EvalSet::sample(int i, MaskKind* kind_out) const {
  if (!images) throw std::logic_error("evaluation set has no image source");
  if (policy.kinds.empty()) throw std::invalid_argument("evaluation policy has no mask kinds");
  const Tensor<float> x = images->image(static_cast<std::uint64_t>(i));
  const MaskKind kind = policy.kinds[static_cast<std::size_t>(i) % policy.kinds.size()];
  MaskGenerator masks(policy, derive_seed(seed, static_cast<std::uint64_t>(i), 7));
  if (kind_out) *kind_out = kind;
  return make_sample(x, masks.generate(kind, x.dim(2), x.dim(3)));
}

namespace {
void require_nonempty(const EvalSet& set) {
  if (set.count < 1) throw std::invalid_argument("evaluation set is empty");
}
}  // namespace

MetricsRecord eval_model(const Generator<float>& generator, const EvalSet& set, bool highres) {
  require_nonempty(set);
  std::vector<SampleMetrics> samples;
  for (int i = 0; i < set.count; ++i) {
    MaskKind kind;
    const Sample s = set.sample(i, &kind);
    const Tensor<float> out = highres ? generator.highres_inpaint(s.u, s.mask) : generator.inpaint(s.u, s.mask);
    SampleMetrics m = measure(out, s.x, s.mask);
    m.index = static_cast<std::uint64_t>(i);
    m.kind = kind;
    samples.push_back(m);
  }
  return summarize(std::move(samples));
}

SimilarityFn ground_truth_similarity(int patch, int stride) {
  return [patch, stride](const Sample& s, std::uint64_t) {
    NoGradGuard guard;
    SimilarityView view;
    view.sim = cosine_similarity(extract_patches(Var<float>(s.x), patch, stride));
    view.sim.known = known_sets(s.mask, patch, stride, 1);
    view.feature_scale = 1;
    return view;
  };
}

SimilarityFn random_similarity(int patch, int stride, std::uint64_t seed) {
  return [patch, stride, seed](const Sample& s, std::uint64_t index) {
    SimilarityView view;
    view.sim.geometry = make_patch_geometry(s.x.dim(1), s.x.dim(2), s.x.dim(3), patch, stride);
    const int p = view.sim.geometry.count();
    Tensor<float> values({s.x.dim(0), p, p});
    Rng rng(derive_seed(seed, index, 9));
    std::uniform_real_distribution<float> d(-1.0f, 1.0f);
    for (auto& v : values.storage()) v = d(rng);
    view.sim.values = Var<float>(std::move(values));
    view.sim.known = known_sets(s.mask, patch, stride, 1);
    return view;
  };
}

SimilarityFn encoder_similarity(const Generator<float>& generator, const SimilarityEncoder<float>& encoder, int patch,
                                int stride) {
  return [&generator, &encoder, patch, stride](const Sample& s, std::uint64_t) {
    NoGradGuard guard;
    const Tensor<float> composite = generator.inpaint(s.u, s.mask);
    SimilarityView view;
    view.sim = cosine_similarity(extract_patches(encoder.forward(Var<float>(composite), s.mask), patch, stride));
    view.sim.known = known_sets(s.mask, patch, stride, kContextScale);
    view.feature_scale = kContextScale;
    return view;
  };
}

SimilarityFn attention_similarity(const Generator<float>& generator) {
  return [&generator](const Sample& s, std::uint64_t) {
    SimilarityView view;
    view.sim = generator.attention_similarity(s.u, s.mask);
    view.feature_scale = generator.size_multiple();
    return view;
  };
}

MetricsRecord eval_jigsaw(const SimilarityFn& source, const EvalSet& set) {
  require_nonempty(set);
  std::vector<SampleMetrics> samples;
  for (int i = 0; i < set.count; ++i) {
    MaskKind kind;
    const Sample s = set.sample(i, &kind);
    const SimilarityView view = source(s, static_cast<std::uint64_t>(i));
    const JigsawResult jig = jigsaw_compose(s.u, s.mask, view.sim, view.feature_scale);
    SampleMetrics m = measure(jig.image, s.x, s.mask);
    m.index = static_cast<std::uint64_t>(i);
    m.kind = kind;
    samples.push_back(m);
  }
  return summarize(std::move(samples));
}

double sign_test_p(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("sign_test_p: unpaired samples");
  int wins = 0, n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == b[i]) continue;
    ++n;
    if (a[i] < b[i]) ++wins;
  }
  if (n == 0) return 1.0;
  double p = 0;
  for (int k = wins; k <= n; ++k) {
    p += std::exp(std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0) - n * std::log(2.0));
  }
  return std::min(1.0, p);
}

double fit_exponent(const std::vector<double>& pixels, const std::vector<double>& seconds) {
  if (pixels.size() != seconds.size() || pixels.size() < 2) {
    throw std::invalid_argument("fit_exponent: need at least two paired points");
  }
  const double n = static_cast<double>(pixels.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    if (!(pixels[i] > 0 && seconds[i] > 0)) throw std::invalid_argument("fit_exponent: non-positive value");
    const double x = std::log(pixels[i]), y = std::log(seconds[i]);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double den = n * sxx - sx * sx;
  if (den == 0) throw std::invalid_argument("fit_exponent: resolutions must differ");
  return (n * sxy - sx * sy) / den;
}

namespace {

template <typename F>
BenchRecord time_runs(int repeats, F run) {
  using clock = std::chrono::steady_clock;
  run();  // warm-up
  std::vector<double> t;
  for (int i = 0; i < repeats; ++i) {
    const auto start = clock::now();
    run();
    t.push_back(std::chrono::duration<double>(clock::now() - start).count());
  }
  std::vector<double> sorted = t;
  std::sort(sorted.begin(), sorted.end());
  BenchRecord r;
  r.seconds = sorted[sorted.size() / 2];
  if (sorted.size() % 2 == 0) r.seconds = 0.5 * (sorted[sorted.size() / 2 - 1] + sorted[sorted.size() / 2]);
  const double mean = std::accumulate(t.begin(), t.end(), 0.0) / static_cast<double>(t.size());
  double var = 0;
  for (double v : t) var += (v - mean) * (v - mean);
  var = t.size() > 1 ? var / static_cast<double>(t.size() - 1) : 0.0;
  r.spread = r.seconds > 0 ? std::sqrt(var) / r.seconds : 0.0;
  r.unstable = r.spread > 0.2;
  return r;
}

Tensor<float> centred_square(int n, int size) {
  Tensor<float> m({n, 1, size, size});
  for (int b = 0; b < n; ++b) {
    for (int y = size / 4; y < size * 3 / 4; ++y) {
      for (int x = size / 4; x < size * 3 / 4; ++x) m.at(b, 0, y, x) = 1.0f;
    }
  }
  return m;
}

}  // namespace

std::vector<BenchRecord> bench_complexity(const BenchOptions& o) {
  if (o.resolutions.size() < 3) throw std::invalid_argument("bench_complexity: need at least 3 resolutions");
  if (o.repeats < 5) throw std::invalid_argument("bench_complexity: need at least 5 repeats");
  init_runtime();
  GeneratorConfig gc = GeneratorConfig::toy();
  gc.base_width = o.base_width;
  gc.patch = o.patch;
  const Generator<float> generator(gc, derive_seed(o.seed, 100));
  const int channels = o.base_width * 4;  // bottleneck width at depth 2

  std::vector<BenchRecord> out;
  for (int res : o.resolutions) {
    if (res % 4 != 0) throw std::invalid_argument("bench_complexity: resolutions must be multiples of 4");
    Initializer init(derive_seed(o.seed, static_cast<std::uint64_t>(res)));
    const Tensor<float> mask = centred_square(1, res);
    const Tensor<float> features = init.normal<float>({1, channels, res / 4, res / 4}, 1.0);
    BenchRecord ca = time_runs(o.repeats, [&] {
      NoGradGuard guard;
      contextual_attention(Var<float>(features), mask, 10.0f, o.patch, 1);
    });
    ca.resolution = res;
    ca.variant = "ca_layer";
    const std::uint64_t cells = static_cast<std::uint64_t>(res / 4) * static_cast<std::uint64_t>(res / 4);
    ca.pairs = ca_similarity_flops(cells, static_cast<std::uint64_t>(o.patch), static_cast<std::uint64_t>(channels));
    out.push_back(ca);

    const Tensor<float> image = init.normal<float>({1, 3, res, res}, 0.3);
    Tensor<float> u = image;
    for (std::size_t i = 0; i < u.size(); ++i) {
      if (mask[i % mask.size()] != 0.0f) u[i] = 0.0f;
    }
    BenchRecord af = time_runs(o.repeats, [&] { generator.inpaint(u, mask); });
    af.resolution = res;
    af.variant = "attention_free";
    out.push_back(af);
  }
  for (const char* variant : {"ca_layer", "attention_free"}) {
    std::vector<double> px, sec;
    for (const auto& r : out) {
      if (r.variant == variant) {
        px.push_back(static_cast<double>(r.resolution) * r.resolution);
        sec.push_back(r.seconds);
      }
    }
    const double e = fit_exponent(px, sec);
    for (auto& r : out) {
      if (r.variant == variant) r.exponent = e;
    }
  }
  if (o.highres) {
    constexpr int kHighres = 1024;
    const Tensor<float> mask = centred_square(1, kHighres);
    Tensor<float> u({1, 3, kHighres, kHighres});
    BenchRecord hr = time_runs(o.repeats, [&] { generator.highres_inpaint(u, mask); });
    hr.resolution = kHighres;
    hr.variant = "attention_free_highres";
    out.push_back(hr);
  }
  return out;
}

void write_metrics_csv(std::ostream& out, const MetricsRecord& record) {
  std::ostringstream os;
  os << std::setprecision(9) << "group,count,l1,psnr,ssim,l1_hole,psnr_hole\n";
  for (const auto& r : record.rows) {
    os << r.group << ',' << r.count << ',' << r.l1 << ',' << r.psnr << ',' << r.ssim << ',' << r.l1_hole << ','
       << r.psnr_hole << '\n';
  }
  out << os.str();
}

void write_samples_csv(std::ostream& out, const MetricsRecord& record) {
  std::ostringstream os;
  os << std::setprecision(9) << "index,kind,l1,psnr,ssim,l1_hole,psnr_hole\n";
  for (const auto& s : record.samples) {
    os << s.index << ',' << to_string(s.kind) << ',' << s.l1 << ',' << s.psnr << ',' << s.ssim << ',' << s.l1_hole
       << ',' << s.psnr_hole << '\n';
  }
  out << os.str();
}

void write_bench_csv(std::ostream& out, const std::vector<BenchRecord>& records) {
  std::ostringstream os;
  os << std::setprecision(9) << "resolution,variant,seconds,spread,unstable,pairs,exponent\n";
  for (const auto& r : records) {
    os << r.resolution << ',' << r.variant << ',' << r.seconds << ',' << r.spread << ',' << (r.unstable ? 1 : 0)
       << ',' << r.pairs << ',' << r.exponent << '\n';
  }
  out << os.str();
}

}  // namespace crfill
