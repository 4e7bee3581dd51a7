#include "dnx/training.hpp"

#include <algorithm>
#include <cmath>

namespace dnx {

template <typename T>
void adam_step(std::vector<ParamRef<T>>& params, const GradientMap<T>& grads,
               AdamState<T>& st) {
  const T lr = warmup_lr(st);
  const int64_t t = st.step + 1;
  const T bc1 = T(1) - std::pow(st.beta1, static_cast<T>(t));
  const T bc2 = T(1) - std::pow(st.beta2, static_cast<T>(t));
  st.skipped_last_step.clear();

  for (ParamRef<T>& p : params) {
    auto& mv = st.moments[p.name];
    if (mv.first.size() != p.data->size()) {
      mv.first.assign(p.data->size(), T(0));
      mv.second.assign(p.data->size(), T(0));
    }
    const std::vector<T>* g = nullptr;
    auto it = grads.find(p.name);
    if (it != grads.end()) {
      if (it->second.size() != p.data->size()) {
        throw ShapeError("gradient size mismatch for " + p.name);
      }
      g = &it->second;
      bool finite = true;
      for (const T v : *g) {
        if (!std::isfinite(static_cast<double>(v))) {
          finite = false;
          break;
        }
      }
      if (!finite) {
        st.skipped_last_step.push_back(p.name);
        continue;
      }
    }
    for (size_t i = 0; i < p.data->size(); ++i) {
      const T gv = g ? (*g)[i] : T(0);
      T& m = mv.first[i];
      T& v = mv.second[i];
      m = st.beta1 * m + (T(1) - st.beta1) * gv;
      v = st.beta2 * v + (T(1) - st.beta2) * gv * gv;
      const T mhat = m / bc1;
      const T vhat = v / bc2;
      (*p.data)[i] -= lr * mhat / (std::sqrt(vhat) + st.eps);
    }
  }
  ++st.step;
}

// ---------------------------------------------------------------------------

template <typename T>
std::vector<ToySample<T>> generate_toy_batch(uint64_t seed, int64_t count,
                                             int64_t image_size,
                                             int64_t reduction,
                                             const TrainRecipe& recipe) {
  if (image_size < 1 || image_size % reduction != 0) {
    throw ShapeError("image size " + std::to_string(image_size) +
                     " not divisible by reduction " + std::to_string(reduction));
  }
  if (recipe.objects_min < 0 || recipe.objects_max < recipe.objects_min) {
    throw ConfigError("invalid objects-per-image range");
  }
  if (recipe.side_min < 1 || recipe.side_max < recipe.side_min ||
      recipe.side_max > image_size) {
    throw ConfigError("invalid object side range");
  }
  const int64_t out_size = image_size / reduction;
  SplitMix64 rng(seed);
  std::vector<ToySample<T>> batch;
  batch.reserve(static_cast<size_t>(count));

  for (int64_t s = 0; s < count; ++s) {
    ToySample<T> sample;
    sample.image = Tensor4<T>({1, 3, image_size, image_size});
    for (auto& v : sample.image.data) {
      v = static_cast<T>(rng.next_gaussian(recipe.noise_sigma));
    }
    const int64_t span = recipe.objects_max - recipe.objects_min + 1;
    const int64_t n_obj =
        recipe.objects_min +
        static_cast<int64_t>(rng.next_unit() * static_cast<double>(span));
    sample.target = Tensor4<T>({1, 1, out_size, out_size});
    for (int64_t o = 0; o < n_obj; ++o) {
      const int64_t side_span = recipe.side_max - recipe.side_min + 1;
      const int64_t side =
          recipe.side_min +
          static_cast<int64_t>(rng.next_unit() * static_cast<double>(side_span));
      const int64_t lim = image_size - side + 1;
      const int64_t row =
          static_cast<int64_t>(rng.next_unit() * static_cast<double>(lim));
      const int64_t col =
          static_cast<int64_t>(rng.next_unit() * static_cast<double>(lim));
      for (int64_t c = 0; c < 3; ++c) {
        for (int64_t y = row; y < row + side; ++y) {
          for (int64_t x = col; x < col + side; ++x) {
            sample.image.at(0, c, y, x) = T(1);
          }
        }
      }
      const int64_t cy = row / reduction;
      const int64_t cx = col / reduction;
      for (int64_t y = 0; y < out_size; ++y) {
        for (int64_t x = 0; x < out_size; ++x) {
          const double d2 = static_cast<double>((y - cy) * (y - cy) +
                                                (x - cx) * (x - cx));
          const T bump = static_cast<T>(std::exp(-d2 / 2.0));  // sigma = 1
          sample.target.at(0, 0, y, x) =
              std::max(sample.target.at(0, 0, y, x), bump);
        }
      }
      sample.objects.push_back({row, col, side});
    }
    batch.push_back(std::move(sample));
  }
  return batch;
}

template <typename T>
T toy_loss_value(const Tensor4<T>& pred, const Tensor4<T>& target) {
  if (!(pred.shape == target.shape)) {
    throw ShapeError("loss shape mismatch: " + pred.shape.str() + " vs " +
                     target.shape.str());
  }
  T sum = T(0);
  for (size_t i = 0; i < pred.data.size(); ++i) {
    const T d = pred.data[i] - target.data[i];
    sum += d * d;
  }
  return sum / static_cast<T>(pred.data.size());
}

template <typename T>
Tensor4<T> toy_loss_grad(const Tensor4<T>& pred, const Tensor4<T>& target) {
  if (!(pred.shape == target.shape)) {
    throw ShapeError("loss shape mismatch: " + pred.shape.str() + " vs " +
                     target.shape.str());
  }
  Tensor4<T> g(pred.shape);
  const T scale = T(2) / static_cast<T>(pred.data.size());
  for (size_t i = 0; i < pred.data.size(); ++i) {
    g.data[i] = scale * (pred.data[i] - target.data[i]);
  }
  return g;
}

namespace {

template <typename T>
void stack_batch(const std::vector<ToySample<T>>& samples, Tensor4<T>& images,
                 Tensor4<T>& targets) {
  const Shape4 is = samples[0].image.shape;
  const Shape4 ts = samples[0].target.shape;
  const int64_t count = static_cast<int64_t>(samples.size());
  images = Tensor4<T>({count, is.c, is.h, is.w});
  targets = Tensor4<T>({count, ts.c, ts.h, ts.w});
  for (int64_t s = 0; s < count; ++s) {
    std::copy(samples[static_cast<size_t>(s)].image.data.begin(),
              samples[static_cast<size_t>(s)].image.data.end(),
              images.data.begin() + s * is.count());
    std::copy(samples[static_cast<size_t>(s)].target.data.begin(),
              samples[static_cast<size_t>(s)].target.data.end(),
              targets.data.begin() + s * ts.count());
  }
}

}  // namespace

template <typename T>
TrainReport train_loop(const ModelConfig& cfg, uint64_t seed,
                       const TrainRecipe& recipe) {
  if (cfg.head != HeadKind::Heatmap) {
    throw ConfigError("train_loop requires a heatmap head");
  }
  const int64_t reduction = cfg.reduction_factor();
  Network<T> net = build_network<T>(cfg, mix_seed(seed, 1));
  std::vector<ParamRef<T>> params = net.parameters();

  AdamState<T> adam;
  adam.lr_max = static_cast<T>(recipe.lr_max);
  adam.warmup_steps = recipe.warmup_steps;

  TrainReport report;
  report.seed = seed;
  report.steps = recipe.steps;

  auto batch_at = [&](int64_t step) {
    std::vector<ToySample<T>> samples = generate_toy_batch<T>(
        mix_seed(seed, 0x100 + static_cast<uint64_t>(step)), recipe.batch,
        recipe.image_size, reduction, recipe);
    Tensor4<T> images, targets;
    stack_batch(samples, images, targets);
    return std::make_pair(std::move(images), std::move(targets));
  };

  if (recipe.steps == 0) {
    auto [images, targets] = batch_at(0);
    NetForward<T> fwd = net.forward(images, BNMode::Train);
    report.initial_loss =
        static_cast<double>(toy_loss_value(fwd.output, targets));
    report.final_loss = report.initial_loss;
    return report;
  }

  for (int64_t step = 0; step < recipe.steps; ++step) {
    auto [images, targets] = batch_at(step);
    NetForward<T> fwd = net.forward(images, BNMode::Train);
    const double loss =
        static_cast<double>(toy_loss_value(fwd.output, targets));
    report.loss_curve.push_back(loss);
    if (!std::isfinite(loss)) {
      report.diverged = true;
      break;
    }
    Tensor4<T> lg = toy_loss_grad(fwd.output, targets);
    NetBackward<T> bwd = net.backward(lg);
    adam_step(params, bwd.grads, adam);
  }
  report.initial_loss = report.loss_curve.front();
  report.final_loss = report.loss_curve.back();
  return report;
}

// ---------------------------------------------------------------------------

namespace {

long double forward_sum(Network<long double>& net,
                        const Tensor4<long double>& x, BNMode mode) {
  NetForward<long double> fwd = net.forward(x, mode);
  long double sum = 0;
  for (long double v : fwd.output.data) sum += v;
  return sum;
}

std::vector<int64_t> pick_coords(int64_t size, const GradCheckOptions& opts,
                                 uint64_t salt) {
  std::vector<int64_t> coords;
  if (size <= opts.exhaustive_limit) {
    coords.resize(static_cast<size_t>(size));
    for (int64_t i = 0; i < size; ++i) coords[static_cast<size_t>(i)] = i;
    return coords;
  }
  SplitMix64 rng(mix_seed(opts.sample_seed, salt));
  for (int64_t i = 0; i < opts.sample_count; ++i) {
    coords.push_back(static_cast<int64_t>(rng.next() % static_cast<uint64_t>(size)));
  }
  std::sort(coords.begin(), coords.end());
  coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
  return coords;
}

double rel_err(double analytic, double numeric) {
  const double denom =
      std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

}  // namespace

GradCheckReport compare_grads(const ModelConfig& cfg, uint64_t build_seed,
                              const Tensor4<double>& x,
                              const GradientMap<double>& analytic,
                              const Tensor4<double>& analytic_grad_input,
                              const GradCheckOptions& opts) {
  // 80-bit twin for the finite-difference side; the seeded gaussian draws
  // happen in double either way, so the parameters widen bit-exactly
  Network<long double> net = build_network<long double>(cfg, build_seed);
  Tensor4<long double> xw(x.shape);
  for (size_t i = 0; i < x.data.size(); ++i) xw.data[i] = x.data[i];
  if (opts.bn_mode == BNMode::Eval) net.forward(xw, BNMode::Train);

  GradCheckReport report;
  report.tolerance = opts.tolerance;
  report.pass = true;
  const long double eps = opts.epsilon;

  uint64_t salt = 1;
  auto check_tensor = [&](const std::string& name,
                          std::vector<long double>* value,
                          const std::vector<double>& grad) {
    GradCheckEntry entry;
    entry.name = name;
    const bool is_input = (value == nullptr);
    std::vector<long double>* target = is_input ? &xw.data : value;
    if (target->size() != grad.size()) {
      throw ShapeError("analytic gradient size mismatch for " + name);
    }
    const std::vector<int64_t> coords =
        pick_coords(static_cast<int64_t>(target->size()), opts, salt++);
    for (int64_t coord : coords) {
      long double& slot = (*target)[static_cast<size_t>(coord)];
      const long double saved = slot;
      slot = saved + eps;
      const long double up = forward_sum(net, xw, opts.bn_mode);
      slot = saved - eps;
      const long double down = forward_sum(net, xw, opts.bn_mode);
      slot = saved;
      const double numeric = static_cast<double>((up - down) / (2.0L * eps));
      const double err = rel_err(grad[static_cast<size_t>(coord)], numeric);
      if (err > entry.max_rel_err) {
        entry.max_rel_err = err;
        entry.worst_coord = coord;
      }
      ++entry.checked;
    }
    if (entry.max_rel_err > opts.tolerance) report.pass = false;
    if (entry.max_rel_err > report.worst_err) {
      report.worst_err = entry.max_rel_err;
      report.worst_tensor = name;
    }
    report.entries.push_back(std::move(entry));
  };

  for (ParamRef<long double>& p : net.parameters()) {
    auto it = analytic.find(p.name);
    if (it == analytic.end()) {
      throw StateError("no analytic gradient for " + p.name);
    }
    check_tensor(p.name, p.data, it->second);
  }
  if (opts.check_input) {
    check_tensor("input", nullptr, analytic_grad_input.data);
  }
  return report;
}

GradCheckReport grad_check(const ModelConfig& cfg, uint64_t build_seed,
                           uint64_t input_seed, const GradCheckOptions& opts) {
  Network<double> net = build_network<double>(cfg, build_seed);
  const Shape4 in_shape{opts.batch, net.config.input_channels, opts.input_h,
                        opts.input_w};
  Tensor4<double> x =
      tensor_from_seed<double>(in_shape, input_seed, Dist::Gaussian, 1.0);
  if (opts.bn_mode == BNMode::Eval) {
    // populate running statistics so the eval-mode graph is well defined
    net.forward(x, BNMode::Train);
  }
  NetForward<double> fwd = net.forward(x, opts.bn_mode);
  Tensor4<double> ones(fwd.output.shape, 1.0);
  NetBackward<double> bwd = net.backward(ones);
  return compare_grads(cfg, build_seed, x, bwd.grads, bwd.grad_input, opts);
}

#define DNX_INSTANTIATE(T)                                                     \
  template struct AdamState<T>;                                                \
  template void adam_step<T>(std::vector<ParamRef<T>>&, const GradientMap<T>&, \
                             AdamState<T>&);                                   \
  template std::vector<ToySample<T>> generate_toy_batch<T>(                    \
      uint64_t, int64_t, int64_t, int64_t, const TrainRecipe&);                \
  template T toy_loss_value<T>(const Tensor4<T>&, const Tensor4<T>&);          \
  template Tensor4<T> toy_loss_grad<T>(const Tensor4<T>&, const Tensor4<T>&);  \
  template TrainReport train_loop<T>(const ModelConfig&, uint64_t,             \
                                     const TrainRecipe&);

DNX_INSTANTIATE(float)
DNX_INSTANTIATE(double)
#undef DNX_INSTANTIATE

}  // namespace dnx
