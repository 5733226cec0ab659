#include "holdfield/fields.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

namespace holdfield {

namespace {

// Softplus with beta = 10; smooth, non-polynomial, stable at both tails.
constexpr double kActBeta = 10.0;

inline double act(double z) {
  const double bz = kActBeta * z;
  if (bz > 30.0) return z;
  if (bz < -30.0) return std::exp(bz) / kActBeta;
  return std::log1p(std::exp(bz)) / kActBeta;
}
inline double act_d(double z) {
  const double bz = kActBeta * z;
  if (bz > 30.0) return 1.0;
  if (bz < -30.0) return std::exp(bz);
  return 1.0 / (1.0 + std::exp(-bz));
}
inline double act_dd(double z) {
  const double s = act_d(z);
  return kActBeta * s * (1.0 - s);
}

inline double pe_freq(int octave) { return std::ldexp(1.0, octave); }  // 2^k

void encode(const MlpArchitecture& arch, const double* x, double* e) {
  const int n = arch.in_dim;
  for (int d = 0; d < n; ++d) e[d] = x[d];
  int idx = n;
  for (int k = 0; k < arch.pe_octaves; ++k) {
    const double w = pe_freq(k);
    for (int d = 0; d < n; ++d) {
      e[idx++] = std::sin(w * x[d]);
      e[idx++] = std::cos(w * x[d]);
    }
  }
}

// d(encoding)/dx contributions: component k of the encoding depends on one
// input coordinate; returns per-component (coordinate, f', f'').
struct EncDeriv {
  int coord;
  double d1, d2;
};

void encode_derivs(const MlpArchitecture& arch, const double* x, std::vector<EncDeriv>& out) {
  const int n = arch.in_dim;
  out.resize(arch.encoded_dim());
  for (int d = 0; d < n; ++d) out[d] = {d, 1.0, 0.0};
  int idx = n;
  for (int k = 0; k < arch.pe_octaves; ++k) {
    const double w = pe_freq(k);
    for (int d = 0; d < n; ++d) {
      const double s = std::sin(w * x[d]), c = std::cos(w * x[d]);
      out[idx++] = {d, w * c, -w * w * s};
      out[idx++] = {d, -w * s, -w * w * c};
    }
  }
}

inline void matvec(const double* __restrict w, const double* __restrict b, int rows, int cols,
                   const double* __restrict in, double* __restrict out) {
  for (int r = 0; r < rows; ++r) {
    const double* __restrict row = w + (size_t)r * cols;
    double acc = b ? b[r] : 0.0;
    for (int c = 0; c < cols; ++c) acc += row[c] * in[c];
    out[r] = acc;
  }
}

// out[c] += w^T g for row-major w (rows x cols).
inline void matvec_t_acc(const double* __restrict w, int rows, int cols,
                         const double* __restrict g, double* __restrict out) {
  for (int r = 0; r < rows; ++r) {
    const double gr = g[r];
    if (gr == 0.0) continue;
    const double* __restrict row = w + (size_t)r * cols;
    for (int c = 0; c < cols; ++c) out[c] += row[c] * gr;
  }
}

inline void outer_acc(double* __restrict wgrad, int rows, int cols, const double* __restrict g,
                      const double* __restrict a) {
  for (int r = 0; r < rows; ++r) {
    const double gr = g[r];
    if (gr == 0.0) continue;
    double* __restrict row = wgrad + (size_t)r * cols;
    for (int c = 0; c < cols; ++c) row[c] += gr * a[c];
  }
}

struct Workspace {
  std::vector<double> enc, z, a, tmp, tmp2, dual_z, dual_a, adj_a, adj_dual;
  std::vector<EncDeriv> derivs;
};

Workspace& workspace() {
  thread_local Workspace ws;
  return ws;
}

}  // namespace

int MlpArchitecture::param_count() const {
  return wc_off() + 3 * color_in_dim() + 3;
}
int MlpArchitecture::w_off(int layer) const {
  if (layer == 0) return 0;
  return hidden * encoded_dim() + hidden + (layer - 1) * (hidden * hidden + hidden);
}
int MlpArchitecture::b_off(int layer) const {
  return w_off(layer) + hidden * (layer == 0 ? encoded_dim() : hidden);
}
int MlpArchitecture::wd_off() const { return w_off(depth - 1) + hidden * (depth == 1 ? encoded_dim() : hidden) + hidden; }
int MlpArchitecture::bd_off() const { return wd_off() + hidden; }
int MlpArchitecture::wc_off() const { return bd_off() + 1; }
int MlpArchitecture::bc_off() const { return wc_off() + 3 * color_in_dim(); }

TrainableField register_field(ParamSet& params, TrainableField field) {
  field.offset = params.add_slice(field.slice, field.arch.param_count(), LrGroup::Field);
  return field;
}

// --- forward passes ---------------------------------------------------------

namespace {

// Runs the trunk; returns a_last in ws.a (layout: [a1 | a2 | ...]), z in ws.z.
void forward_trunk(const MlpArchitecture& arch, const double* p, const double* e, Workspace& ws) {
  const int h = arch.hidden;
  ws.z.resize((size_t)arch.depth * h);
  ws.a.resize((size_t)arch.depth * h);
  const double* in = e;
  int in_dim = arch.encoded_dim();
  for (int l = 0; l < arch.depth; ++l) {
    double* z = ws.z.data() + (size_t)l * h;
    double* a = ws.a.data() + (size_t)l * h;
    matvec(p + arch.w_off(l), p + arch.b_off(l), h, in_dim, in, z);
    for (int i = 0; i < h; ++i) a[i] = act(z[i]);
    in = a;
    in_dim = h;
  }
}

inline double sigmoid_stable(double v) {
  return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
}

}  // namespace

FieldSample eval_mlp(const MlpArchitecture& arch, const double* p, const double* x_in,
                     const double* latent, const double* extra) {
  Workspace& ws = workspace();
  ws.enc.resize(arch.encoded_dim());
  encode(arch, x_in, ws.enc.data());
  forward_trunk(arch, p, ws.enc.data(), ws);
  const int h = arch.hidden;
  const double* a_last = ws.a.data() + (size_t)(arch.depth - 1) * h;

  FieldSample out;
  const double* wd = p + arch.wd_off();
  double d = p[arch.bd_off()];
  for (int i = 0; i < h; ++i) d += wd[i] * a_last[i];
  out.d = d;

  ws.tmp.resize(arch.color_in_dim());
  std::memcpy(ws.tmp.data(), a_last, h * sizeof(double));
  for (int i = 0; i < arch.latent_dim; ++i) ws.tmp[h + i] = latent ? latent[i] : 0.0;
  for (int i = 0; i < arch.extra_dim; ++i) ws.tmp[h + arch.latent_dim + i] = extra ? extra[i] : 0.0;
  double c_raw[3];
  matvec(p + arch.wc_off(), p + arch.bc_off(), 3, arch.color_in_dim(), ws.tmp.data(), c_raw);
  out.c = {sigmoid_stable(c_raw[0]), sigmoid_stable(c_raw[1]), sigmoid_stable(c_raw[2])};
  return out;
}

double eval_mlp_distance_grad(const MlpArchitecture& arch, const double* p, const double* x_in,
                              double* grad_out) {
  Workspace& ws = workspace();
  ws.enc.resize(arch.encoded_dim());
  encode(arch, x_in, ws.enc.data());
  forward_trunk(arch, p, ws.enc.data(), ws);
  const int h = arch.hidden;
  const double* a_last = ws.a.data() + (size_t)(arch.depth - 1) * h;
  const double* wd = p + arch.wd_off();
  double d = p[arch.bd_off()];
  for (int i = 0; i < h; ++i) d += wd[i] * a_last[i];

  // Reverse chain u_l for the input gradient.
  ws.tmp.assign(h, 0.0);
  ws.tmp2.assign(std::max(h, arch.encoded_dim()), 0.0);
  std::memcpy(ws.tmp.data(), wd, h * sizeof(double));
  for (int l = arch.depth - 1; l >= 0; --l) {
    const double* z = ws.z.data() + (size_t)l * h;
    for (int i = 0; i < h; ++i) ws.tmp[i] *= act_d(z[i]);
    const int in_dim = l == 0 ? arch.encoded_dim() : h;
    std::fill(ws.tmp2.begin(), ws.tmp2.begin() + in_dim, 0.0);
    matvec_t_acc(p + arch.w_off(l), h, in_dim, ws.tmp.data(), ws.tmp2.data());
    std::swap(ws.tmp, ws.tmp2);
  }
  // ws.tmp now holds the encoding-space gradient.
  encode_derivs(arch, x_in, ws.derivs);
  for (int i = 0; i < arch.in_dim; ++i) grad_out[i] = 0.0;
  for (int k = 0; k < arch.encoded_dim(); ++k)
    grad_out[ws.derivs[k].coord] += ws.derivs[k].d1 * ws.tmp[k];
  return d;
}

FieldSample eval_hand(const TrainableField& f, const ParamSet& params, const Vec3& x) {
  const double in[3] = {x.x, x.y, x.z};
  return eval_mlp(f.arch, params.values.data() + f.offset, in, nullptr, nullptr);
}

FieldSample eval_object(const TrainableField& f, const ParamSet& params, const Vec3& x,
                        const double* z_object) {
  const double in[3] = {x.x, x.y, x.z};
  return eval_mlp(f.arch, params.values.data() + f.offset, in, z_object, nullptr);
}

std::array<double, 4> inverted_sphere_param(const Vec3& x, double r_bg) {
  const double r = norm(x);
  if (r < r_bg) throw InsideForeground();
  const Vec3 dir = x / r;
  const double q = std::clamp(r_bg / r, 1e-6, 1.0);
  return {dir.x, dir.y, dir.z, q};
}

FieldSample eval_background(const TrainableField& f, const ParamSet& params, const Vec3& x,
                            const Vec3& view, const double* z_background, double r_bg) {
  const auto in = inverted_sphere_param(x, r_bg);
  const double extra[3] = {view.x, view.y, view.z};
  return eval_mlp(f.arch, params.values.data() + f.offset, in.data(), z_background, extra);
}

// --- geometric initialization -------------------------------------------------

void init_geometric(ParamSet& params, const TrainableField& field, double radius, uint64_t seed) {
  const MlpArchitecture& arch = field.arch;
  double* p = params.values.data() + field.offset;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const int h = arch.hidden;

  for (int l = 0; l < arch.depth; ++l) {
    const int in_dim = l == 0 ? arch.encoded_dim() : h;
    const double sigma = std::sqrt(2.0) / std::sqrt((double)h);
    double* w = p + arch.w_off(l);
    for (int i = 0; i < h * in_dim; ++i) w[i] = sigma * gauss(rng);
    if (l == 0) {
      // Only the raw coordinates pass at initialization.
      for (int r = 0; r < h; ++r)
        for (int c = arch.in_dim; c < in_dim; ++c) w[r * in_dim + c] = 0.0;
    }
    double* b = p + arch.b_off(l);
    for (int i = 0; i < h; ++i) b[i] = 0.0;
  }
  double* wd = p + arch.wd_off();
  const double wmean = std::sqrt(M_PI) / std::sqrt((double)h);
  for (int i = 0; i < h; ++i) wd[i] = wmean + 0.02 * wmean * gauss(rng);
  p[arch.bd_off()] = -radius;

  double* wc = p + arch.wc_off();
  for (int i = 0; i < 3 * arch.color_in_dim(); ++i) wc[i] = 0.05 * gauss(rng);
  for (int i = 0; i < 3; ++i) p[arch.bc_off() + i] = 0.0;

  // Calibrate against the exact sphere SDF with a short deterministic fit so
  // the start really is a signed distance to a radius-`radius` sphere.
  std::mt19937_64 probe_rng(seed ^ 0x9e3779b97f4a7c15ull);
  std::normal_distribution<double> pg(0.0, 1.0);
  std::uniform_real_distribution<double> ru(0.02, 4.0 * radius);
  const int steps = 300, batch = 128;
  std::vector<double> m((size_t)arch.param_count(), 0.0), v((size_t)arch.param_count(), 0.0);
  std::vector<double> grad((size_t)arch.param_count());
  const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  for (int step = 0; step < steps; ++step) {
    std::fill(grad.begin(), grad.end(), 0.0);
    ParamSet scoped;  // standalone view over this field's block
    scoped.values.assign(p, p + arch.param_count());
    Tape tape(&scoped);
    Var loss = tape.constant(0.0);
    for (int i = 0; i < batch; ++i) {
      Vec3 dir{pg(probe_rng), pg(probe_rng), pg(probe_rng)};
      dir = normalized(dir);
      const Vec3 x = dir * ru(probe_rng);
      std::vector<Var> xs(arch.in_dim);
      for (int k = 0; k < arch.in_dim; ++k)
        xs[k] = tape.constant(k < 3 ? x[k] : 0.3 + 0.4 * std::abs(pg(probe_rng)));
      const TapeFieldSample s = eval_mlp_tape(tape, arch, 0, xs, {}, {});
      const Var r = s.d - (norm(x) - radius);
      loss = loss + r * r;
    }
    tape.backward(loss);
    const double lr = 2e-3 * 0.5 * (1.0 + std::cos(M_PI * step / steps)) + 1e-4;
    const double bc1 = 1.0 - std::pow(beta1, step + 1);
    const double bc2 = 1.0 - std::pow(beta2, step + 1);
    for (int i = 0; i < arch.param_count(); ++i) {
      const double g = tape.param_grad()[i] / batch;
      m[i] = beta1 * m[i] + (1 - beta1) * g;
      v[i] = beta2 * v[i] + (1 - beta2) * g * g;
      p[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
    }
  }
}

// --- tape fat nodes ----------------------------------------------------------

namespace {

struct MlpEvalNode : FatNode {
  MlpArchitecture arch;
  int param_offset;
  std::vector<int> x_ids, latent_ids, extra_ids;
  int out_d = -1, out_c[3] = {-1, -1, -1};
  std::vector<double> enc, z, a, color_in;
  std::vector<EncDeriv> derivs;

  void backward(Tape& tape) override {
    const double* p = tape.param_values() + param_offset;
    double* pg = tape.param_grad().data() + param_offset;
    const int h = arch.hidden;
    const int ci = arch.color_in_dim();

    const double gd = tape.adj(out_d);
    double gc[3] = {tape.adj(out_c[0]), tape.adj(out_c[1]), tape.adj(out_c[2])};

    // Color head.
    std::vector<double> color_in_adj(ci, 0.0);
    outer_acc(pg + arch.wc_off(), 3, ci, gc, color_in.data());
    for (int i = 0; i < 3; ++i) pg[arch.bc_off() + i] += gc[i];
    matvec_t_acc(p + arch.wc_off(), 3, ci, gc, color_in_adj.data());
    for (int i = 0; i < arch.latent_dim; ++i)
      if (!latent_ids.empty()) tape.add_adj(latent_ids[i], color_in_adj[h + i]);
    for (int i = 0; i < arch.extra_dim; ++i)
      if (!extra_ids.empty()) tape.add_adj(extra_ids[i], color_in_adj[h + arch.latent_dim + i]);

    // Distance head.
    std::vector<double> delta(h, 0.0);
    const double* a_last = a.data() + (size_t)(arch.depth - 1) * h;
    const double* wd = p + arch.wd_off();
    for (int i = 0; i < h; ++i) delta[i] = gd * wd[i] + color_in_adj[i];
    if (gd != 0.0) {
      double* wdg = pg + arch.wd_off();
      for (int i = 0; i < h; ++i) wdg[i] += gd * a_last[i];
      pg[arch.bd_off()] += gd;
    }

    // Trunk.
    std::vector<double> next;
    for (int l = arch.depth - 1; l >= 0; --l) {
      const double* zl = z.data() + (size_t)l * h;
      for (int i = 0; i < h; ++i) delta[i] *= act_d(zl[i]);
      const int in_dim = l == 0 ? arch.encoded_dim() : h;
      const double* a_in = l == 0 ? enc.data() : a.data() + (size_t)(l - 1) * h;
      outer_acc(pg + arch.w_off(l), h, in_dim, delta.data(), a_in);
      for (int i = 0; i < h; ++i) pg[arch.b_off(l) + i] += delta[i];
      next.assign(in_dim, 0.0);
      matvec_t_acc(p + arch.w_off(l), h, in_dim, delta.data(), next.data());
      std::swap(delta, next);
    }
    // delta now holds the encoding adjoint.
    for (int k = 0; k < arch.encoded_dim(); ++k)
      tape.add_adj(x_ids[derivs[k].coord], derivs[k].d1 * delta[k]);
  }
};

struct MlpDistGradNode : FatNode {
  MlpArchitecture arch;
  int param_offset;
  std::vector<int> x_ids;
  int out_d = -1, out_g[3] = {-1, -1, -1};
  std::vector<double> enc, z, a;
  std::vector<double> x_raw;
  std::vector<EncDeriv> derivs;

  void backward(Tape& tape) override {
    const double* p = tape.param_values() + param_offset;
    double* pg = tape.param_grad().data() + param_offset;
    const int h = arch.hidden;
    const int enc_dim = arch.encoded_dim();
    const double gd = tape.adj(out_d);
    double ghat[3];
    for (int i = 0; i < arch.in_dim && i < 3; ++i) ghat[i] = tape.adj(out_g[i]);

    // Dual forward with tangent xdot = ghat.
    std::vector<double> enc_dot(enc_dim);
    for (int k = 0; k < enc_dim; ++k)
      enc_dot[k] = derivs[k].d1 * ghat[derivs[k].coord];
    std::vector<double> zdot((size_t)arch.depth * h), adot((size_t)arch.depth * h);
    {
      const double* in = enc_dot.data();
      int in_dim = enc_dim;
      for (int l = 0; l < arch.depth; ++l) {
        double* zd = zdot.data() + (size_t)l * h;
        double* ad = adot.data() + (size_t)l * h;
        matvec(p + arch.w_off(l), nullptr, h, in_dim, in, zd);
        const double* zl = z.data() + (size_t)l * h;
        for (int i = 0; i < h; ++i) ad[i] = act_d(zl[i]) * zd[i];
        in = ad;
        in_dim = h;
      }
    }

    const double* wd = p + arch.wd_off();
    const double* a_last = a.data() + (size_t)(arch.depth - 1) * h;
    const double* adot_last = adot.data() + (size_t)(arch.depth - 1) * h;

    // Seeds: value lane from d, dual lane from ddot (adjoint 1).
    std::vector<double> abar(h), abardot(h);
    for (int i = 0; i < h; ++i) {
      abar[i] = gd * wd[i];
      abardot[i] = wd[i];
    }
    {
      double* wdg = pg + arch.wd_off();
      for (int i = 0; i < h; ++i) wdg[i] += gd * a_last[i] + adot_last[i];
      pg[arch.bd_off()] += gd;
    }

    std::vector<double> zbar(h), zbardot(h), nbar, nbardot;
    for (int l = arch.depth - 1; l >= 0; --l) {
      const double* zl = z.data() + (size_t)l * h;
      const double* zdl = zdot.data() + (size_t)l * h;
      for (int i = 0; i < h; ++i) {
        const double d1 = act_d(zl[i]);
        zbar[i] = d1 * abar[i] + act_dd(zl[i]) * zdl[i] * abardot[i];
        zbardot[i] = d1 * abardot[i];
      }
      const int in_dim = l == 0 ? enc_dim : h;
      const double* a_in = l == 0 ? enc.data() : a.data() + (size_t)(l - 1) * h;
      const double* adot_in = l == 0 ? enc_dot.data() : adot.data() + (size_t)(l - 1) * h;
      outer_acc(pg + arch.w_off(l), h, in_dim, zbar.data(), a_in);
      outer_acc(pg + arch.w_off(l), h, in_dim, zbardot.data(), adot_in);
      for (int i = 0; i < h; ++i) pg[arch.b_off(l) + i] += zbar[i];
      nbar.assign(in_dim, 0.0);
      nbardot.assign(in_dim, 0.0);
      matvec_t_acc(p + arch.w_off(l), h, in_dim, zbar.data(), nbar.data());
      matvec_t_acc(p + arch.w_off(l), h, in_dim, zbardot.data(), nbardot.data());
      std::swap(abar, nbar);
      std::swap(abardot, nbardot);
    }
    // abar / abardot hold the encoding adjoints of the two lanes.
    for (int k = 0; k < enc_dim; ++k) {
      const int c = derivs[k].coord;
      tape.add_adj(x_ids[c], derivs[k].d1 * abar[k] + derivs[k].d2 * ghat[c] * abardot[k]);
    }
  }
};

}  // namespace

TapeFieldSample eval_mlp_tape(Tape& tape, const MlpArchitecture& arch, int param_offset,
                              std::span<const Var> x, std::span<const Var> latent,
                              std::span<const Var> extra) {
  auto node = std::make_unique<MlpEvalNode>();
  node->arch = arch;
  node->param_offset = param_offset;
  std::vector<double> x_raw(arch.in_dim);
  for (int i = 0; i < arch.in_dim; ++i) {
    node->x_ids.push_back(x[i].id);
    x_raw[i] = x[i].value();
  }
  for (const Var& v : latent) node->latent_ids.push_back(v.id);
  for (const Var& v : extra) node->extra_ids.push_back(v.id);

  const double* p = tape.param_values() + param_offset;
  node->enc.resize(arch.encoded_dim());
  encode(arch, x_raw.data(), node->enc.data());
  encode_derivs(arch, x_raw.data(), node->derivs);

  Workspace& ws = workspace();
  forward_trunk(arch, p, node->enc.data(), ws);
  node->z = ws.z;
  node->a = ws.a;
  const int h = arch.hidden;
  const double* a_last = node->a.data() + (size_t)(arch.depth - 1) * h;

  double d = p[arch.bd_off()];
  const double* wd = p + arch.wd_off();
  for (int i = 0; i < h; ++i) d += wd[i] * a_last[i];

  node->color_in.resize(arch.color_in_dim());
  std::memcpy(node->color_in.data(), a_last, h * sizeof(double));
  for (int i = 0; i < arch.latent_dim; ++i)
    node->color_in[h + i] = latent.empty() ? 0.0 : latent[i].value();
  for (int i = 0; i < arch.extra_dim; ++i)
    node->color_in[h + arch.latent_dim + i] = extra.empty() ? 0.0 : extra[i].value();
  double c_raw[3];
  matvec(p + arch.wc_off(), p + arch.bc_off(), 3, arch.color_in_dim(), node->color_in.data(),
         c_raw);

  MlpEvalNode* raw = node.get();
  tape.push_fat(std::move(node));
  TapeFieldSample out;
  out.d = tape.fat_output(d);
  raw->out_d = out.d.id;
  Var craw[3];
  for (int i = 0; i < 3; ++i) {
    craw[i] = tape.fat_output(c_raw[i]);
    raw->out_c[i] = craw[i].id;
  }
  for (int i = 0; i < 3; ++i) out.c[i] = sigmoid(craw[i]);
  return out;
}

TapeDistGrad eval_mlp_distance_grad_tape(Tape& tape, const MlpArchitecture& arch,
                                         int param_offset, std::span<const Var> x) {
  auto node = std::make_unique<MlpDistGradNode>();
  node->arch = arch;
  node->param_offset = param_offset;
  node->x_raw.resize(arch.in_dim);
  for (int i = 0; i < arch.in_dim; ++i) {
    node->x_ids.push_back(x[i].id);
    node->x_raw[i] = x[i].value();
  }
  const double* p = tape.param_values() + param_offset;
  node->enc.resize(arch.encoded_dim());
  encode(arch, node->x_raw.data(), node->enc.data());
  encode_derivs(arch, node->x_raw.data(), node->derivs);

  Workspace& ws = workspace();
  forward_trunk(arch, p, node->enc.data(), ws);
  node->z = ws.z;
  node->a = ws.a;
  const int h = arch.hidden;
  const double* a_last = node->a.data() + (size_t)(arch.depth - 1) * h;
  double d = p[arch.bd_off()];
  const double* wd = p + arch.wd_off();
  for (int i = 0; i < h; ++i) d += wd[i] * a_last[i];

  // Input-space gradient for the output values.
  std::vector<double> u(wd, wd + h), u_next;
  for (int l = arch.depth - 1; l >= 0; --l) {
    const double* zl = node->z.data() + (size_t)l * h;
    for (int i = 0; i < h; ++i) u[i] *= act_d(zl[i]);
    const int in_dim = l == 0 ? arch.encoded_dim() : h;
    u_next.assign(in_dim, 0.0);
    matvec_t_acc(p + arch.w_off(l), h, in_dim, u.data(), u_next.data());
    std::swap(u, u_next);
  }
  double g[3] = {0, 0, 0};
  for (int k = 0; k < arch.encoded_dim(); ++k)
    g[node->derivs[k].coord] += node->derivs[k].d1 * u[k];

  MlpDistGradNode* raw = node.get();
  tape.push_fat(std::move(node));
  TapeDistGrad out;
  out.d = tape.fat_output(d);
  raw->out_d = out.d.id;
  for (int i = 0; i < 3; ++i) {
    out.g[i] = tape.fat_output(g[i]);
    raw->out_g[i] = out.g[i].id;
  }
  return out;
}

// --- analytic shapes -----------------------------------------------------------

AnalyticShape AnalyticShape::sphere(double r) {
  AnalyticShape s;
  s.kind = Kind::Sphere;
  s.radius = r;
  return s;
}
AnalyticShape AnalyticShape::box(const Vec3& half_extents) {
  AnalyticShape s;
  s.kind = Kind::Box;
  s.half_extents = half_extents;
  return s;
}
AnalyticShape AnalyticShape::capsule(double half_length, double r) {
  AnalyticShape s;
  s.kind = Kind::Capsule;
  s.half_length = half_length;
  s.radius = r;
  return s;
}
AnalyticShape AnalyticShape::union_of(std::vector<AnalyticShape> shapes) {
  AnalyticShape s;
  s.kind = Kind::Union;
  s.children = std::move(shapes);
  return s;
}

double analytic_sdf(const AnalyticShape& shape, const Vec3& p_in) {
  const Vec3 p = inverse_apply(shape.to_world, p_in);
  double d;
  switch (shape.kind) {
    case AnalyticShape::Kind::Sphere:
      d = norm(p) - shape.radius;
      break;
    case AnalyticShape::Kind::Box: {
      const Vec3 q{std::abs(p.x) - shape.half_extents.x, std::abs(p.y) - shape.half_extents.y,
                   std::abs(p.z) - shape.half_extents.z};
      const Vec3 qp{std::max(q.x, 0.0), std::max(q.y, 0.0), std::max(q.z, 0.0)};
      d = norm(qp) + std::min(std::max({q.x, q.y, q.z}), 0.0);
      break;
    }
    case AnalyticShape::Kind::Capsule: {
      const double zc = std::clamp(p.z, -shape.half_length, shape.half_length);
      d = std::sqrt(p.x * p.x + p.y * p.y + (p.z - zc) * (p.z - zc)) - shape.radius;
      break;
    }
    case AnalyticShape::Kind::Union: {
      d = std::numeric_limits<double>::infinity();
      for (const auto& child : shape.children) d = std::min(d, analytic_sdf(child, p));
      break;
    }
  }
  return d * shape.to_world.scale;
}

// --- checkpoints -----------------------------------------------------------------

namespace {

template <typename T>
void write_pod(std::ofstream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
template <typename T>
T read_pod(std::ifstream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

void write_f32(std::ofstream& os, const std::vector<double>& v) {
  write_pod(os, (uint64_t)v.size());
  for (double x : v) write_pod(os, (float)x);
}
std::vector<double> read_f32(std::ifstream& is) {
  const uint64_t n = read_pod<uint64_t>(is);
  std::vector<double> out(n);
  for (uint64_t i = 0; i < n; ++i) out[i] = read_pod<float>(is);
  return out;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("save_checkpoint: cannot open " + path);
  os.write("HOLDF001", 8);
  write_pod(os, (uint32_t)1);  // container version
  write_pod(os, (uint32_t)ckpt.archs.size());
  for (const auto& a : ckpt.archs) {
    write_pod(os, (int32_t)a.in_dim);
    write_pod(os, (int32_t)a.pe_octaves);
    write_pod(os, (int32_t)a.hidden);
    write_pod(os, (int32_t)a.depth);
    write_pod(os, (int32_t)a.latent_dim);
    write_pod(os, (int32_t)a.extra_dim);
  }
  write_pod(os, (uint32_t)ckpt.params.slices.size());
  for (const auto& s : ckpt.params.slices) {
    write_pod(os, (uint16_t)s.name.size());
    os.write(s.name.data(), (std::streamsize)s.name.size());
    write_pod(os, (int32_t)s.count);
    write_pod(os, (int8_t)s.group);
  }
  write_f32(os, ckpt.params.values);
  const uint8_t has_opt = ckpt.adam_m.empty() ? 0 : 1;
  write_pod(os, has_opt);
  if (has_opt) {
    write_f32(os, ckpt.adam_m);
    write_f32(os, ckpt.adam_v);
    write_pod(os, (int64_t)ckpt.adam_step);
  }
  if (!os) throw Error("save_checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("load_checkpoint: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (std::string(magic, 8) != "HOLDF001") throw Error("bad checkpoint magic in " + path);
  const uint32_t version = read_pod<uint32_t>(is);
  if (version != 1) throw Error("unsupported checkpoint version");
  Checkpoint ckpt;
  const uint32_t n_arch = read_pod<uint32_t>(is);
  for (uint32_t i = 0; i < n_arch; ++i) {
    MlpArchitecture a;
    a.in_dim = read_pod<int32_t>(is);
    a.pe_octaves = read_pod<int32_t>(is);
    a.hidden = read_pod<int32_t>(is);
    a.depth = read_pod<int32_t>(is);
    a.latent_dim = read_pod<int32_t>(is);
    a.extra_dim = read_pod<int32_t>(is);
    ckpt.archs.push_back(a);
  }
  const uint32_t n_slices = read_pod<uint32_t>(is);
  for (uint32_t i = 0; i < n_slices; ++i) {
    const uint16_t len = read_pod<uint16_t>(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    const int32_t count = read_pod<int32_t>(is);
    const int8_t group = read_pod<int8_t>(is);
    ckpt.params.add_slice(name, count, (LrGroup)group);
  }
  ckpt.params.values = read_f32(is);
  if (read_pod<uint8_t>(is)) {
    ckpt.adam_m = read_f32(is);
    ckpt.adam_v = read_f32(is);
    ckpt.adam_step = read_pod<int64_t>(is);
  }
  if (!is) throw Error("load_checkpoint: truncated file " + path);
  return ckpt;
}

}  // namespace holdfield
