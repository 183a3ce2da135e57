#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "noisyquant/linear.hpp"
#include "noisyquant/rng.hpp"

using nq::QuantLinearLayer;
using nq::QuantParams;
using nq::Tensor2D;

static QuantParams tensor_params(int bits, double scale) {
    QuantParams p;
    p.bits = bits;
    p.scales = {scale};
    return p;
}

// near-identity quantizer: tiny scale so everything is representable to
// float precision
static QuantParams fine_grid(double scale = 1e-5) { return tensor_params(32, scale); }

static QuantLinearLayer random_layer(size_t k, size_t m, int bits_w, int bits_a, uint64_t seed,
                                     double act_range = 2.0) {
    nq::Rng rng(seed);
    QuantLinearLayer l;
    l.weight = Tensor2D(k, m);
    for (float& v : l.weight.values())
        v = static_cast<float>(rng.gaussian() / std::sqrt(static_cast<double>(m)));
    l.bias = Tensor2D(k, 1);
    for (float& v : l.bias.values()) v = static_cast<float>(rng.uniform(-0.5, 0.5));
    l.w_params = nq::fit_weight_minmax(l.weight, bits_w);
    QuantParams ap;
    ap.bits = bits_a;
    ap.scales = {act_range / static_cast<double>(ap.qmax())};
    ap.bits = bits_a;
    l.a_params.grid = ap;
    return l;
}

static Tensor2D random_input(size_t m, size_t t, uint64_t seed, double range = 1.5) {
    nq::Rng rng(seed);
    Tensor2D x(m, t);
    for (float& v : x.values()) v = static_cast<float>(rng.uniform(-range, range));
    return x;
}

TEST_CASE("forward_fp") {
    QuantLinearLayer l;
    l.weight = Tensor2D(2, 2, {1, 0, 0, 1});
    l.bias = Tensor2D(2, 1);
    Tensor2D x(2, 3, {1, 2, 3, 4, 5, 6});
    CHECK(nq::forward_fp(l, x) == x);

    l.weight = Tensor2D(2, 2, {1, 2, 3, 4});
    Tensor2D v(2, 1, {1, -1});
    Tensor2D r = nq::forward_fp(l, v);
    CHECK(r.at(0, 0) == doctest::Approx(-1));
    CHECK(r.at(1, 0) == doctest::Approx(-1));

    l.bias = Tensor2D(2, 1, {0.5f, -0.5f});
    Tensor2D zero(2, 2);
    Tensor2D rb = nq::forward_fp(l, zero);
    CHECK(rb.at(0, 0) == 0.5f);
    CHECK(rb.at(0, 1) == 0.5f);
    CHECK(rb.at(1, 0) == -0.5f);
}

TEST_CASE("forward_quant matches fp on fine grids and on-grid inputs") {
    QuantLinearLayer l = random_layer(8, 8, 8, 8, 3);
    l.w_params = nq::fit_weight_minmax(l.weight, 24);
    l.a_params.grid = fine_grid();
    Tensor2D x = random_input(8, 4, 5);
    const Tensor2D fp = nq::forward_fp(l, x);
    const Tensor2D q = nq::forward_quant(l, x);
    for (size_t i = 0; i < fp.size(); ++i)
        CHECK(q.values()[i] == doctest::Approx(fp.values()[i]).epsilon(1e-4));

    // exact representability: weights and activations on their grids
    QuantLinearLayer e;
    e.weight = Tensor2D(2, 2, {3.0f, -1.0f, 2.0f, 4.0f});
    e.bias = Tensor2D(2, 1, {1.0f, -1.0f});
    e.w_params = nq::fit_weight_minmax(e.weight, 4); // channel scales 3/7 would not be exact
    // use scales where the weights are exact grid points
    e.w_params.scales = {1.0, 1.0};
    e.a_params.grid = tensor_params(8, 0.5);
    Tensor2D xe(2, 1, {0.5f, -1.5f});
    CHECK(nq::forward_quant(e, xe) == nq::forward_fp(e, xe));
}

TEST_CASE("forward_quant with 2-bit per-channel weights against hand arithmetic") {
    QuantLinearLayer l;
    l.weight = Tensor2D(2, 2, {1, 2, 3, 4});
    l.bias = Tensor2D(2, 1);
    l.w_params = nq::fit_weight_minmax(l.weight, 2); // qmax = 1, scales {2, 4}
    CHECK(l.w_params.scales[0] == doctest::Approx(2.0));
    CHECK(l.w_params.scales[1] == doctest::Approx(4.0));
    // quantized weights: round(1/2)=1 -> 2 (half away), round(2/2)=1 -> 2
    //                    round(3/4)=1 -> 4, round(4/4)=1 -> 4
    l.a_params.grid = fine_grid();
    Tensor2D x(2, 1, {1.0f, 1.0f});
    const Tensor2D q = nq::forward_quant(l, x);
    CHECK(q.at(0, 0) == doctest::Approx(4.0).epsilon(1e-4));
    CHECK(q.at(1, 0) == doctest::Approx(8.0).epsilon(1e-4));
}

TEST_CASE("attach_noise: hand-checked denoising bias via the value hook") {
    QuantLinearLayer l;
    l.weight = Tensor2D(2, 2, {1, 2, 3, 4});
    l.bias = Tensor2D(2, 1);
    l.w_params = nq::fit_weight_minmax(l.weight, 8);
    l.w_params.scales = {1.0, 1.0}; // identity-exact weight grid
    l.a_params.grid = tensor_params(8, 256.0); // noise_scale = 1, codes exact
    nq::attach_noise_values(l, {1.0, -1.0}, 1.0, 0);
    // B' = B - W N = -[1*1 + 2*(-1), 3*1 + 4*(-1)] = [1, 1]
    CHECK(l.denoise_bias.at(0, 0) == doctest::Approx(1.0));
    CHECK(l.denoise_bias.at(1, 0) == doctest::Approx(1.0));
}

TEST_CASE("attach_noise determinism and n = 0 disabled") {
    QuantLinearLayer a = random_layer(4, 6, 8, 8, 11);
    QuantLinearLayer b = random_layer(4, 6, 8, 8, 11);
    nq::attach_noise(a, 0.1, 77);
    nq::attach_noise(b, 0.1, 77);
    CHECK(a.noisy->values == b.noisy->values);
    CHECK(a.denoise_bias == b.denoise_bias);
    CHECK(a.noisy->int16_image == b.noisy->int16_image);
    for (float v : a.noisy->values.values()) {
        CHECK(v >= -0.1f);
        CHECK(v <= 0.1f);
    }

    QuantLinearLayer z = random_layer(4, 6, 8, 8, 11);
    nq::attach_noise(z, 0.0, 77);
    CHECK_FALSE(z.noisy->enabled);
    for (float v : z.noisy->values.values()) CHECK(v == 0.0f);
    CHECK(z.denoise_bias == z.bias);
}

TEST_CASE("noisy bias invariants: int16 image reconstructs values") {
    QuantLinearLayer l = random_layer(8, 32, 6, 6, 21);
    nq::attach_noise(l, 0.8 * l.a_params.ref_scale(), 5);
    const auto& nb = *l.noisy;
    for (size_t i = 0; i < nb.int16_image.size(); ++i) {
        CHECK(std::abs(nb.int16_image[i]) <= 32767);
        CHECK(nb.values.at(i, 0) ==
              doctest::Approx(nb.int16_image[i] * nb.noise_scale).epsilon(1e-7));
    }
    // B' recomputation is bitwise stable
    CHECK(nq::compute_denoise_bias(l, nb.values) == l.denoise_bias);
}

TEST_CASE("denoising cancels exactly with identity quantizers") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
        QuantLinearLayer l = random_layer(6, 6, 8, 8, 100 + seed);
        l.w_params = nq::fit_weight_minmax(l.weight, 24);
        l.a_params.grid = fine_grid(1e-6);
        Tensor2D x = random_input(6, 3, 200 + seed);
        nq::attach_noise(l, 0.5 * l.a_params.ref_scale() * 1e5, 7); // sizeable noise
        const Tensor2D fp = nq::forward_fp(l, x);
        const Tensor2D nqo = nq::forward_noisyquant(l, x);
        for (size_t i = 0; i < fp.size(); ++i)
            CHECK(nqo.values()[i] ==
                  doctest::Approx(fp.values()[i]).epsilon(1e-4).scale(1.0));
    }
}

TEST_CASE("n = 0 noisy forward equals plain quant forward bitwise") {
    QuantLinearLayer l = random_layer(8, 16, 6, 6, 31);
    Tensor2D x = random_input(16, 5, 32);
    nq::attach_noise(l, 0.0, 3);
    CHECK(nq::forward_noisyquant(l, x) == nq::forward_quant(l, x));
}

TEST_CASE("noisy forward without noise attached throws") {
    QuantLinearLayer l = random_layer(4, 4, 8, 8, 41);
    CHECK_THROWS_AS(nq::forward_noisyquant(l, Tensor2D(4, 2)), nq::ConfigError);
    CHECK_THROWS_AS(nq::forward_integer(l, Tensor2D(4, 2)), nq::ConfigError);
}

TEST_CASE("integer path stays within the analytic fixed-point bound") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
        QuantLinearLayer l = random_layer(64, 64, 6, 6, 1000 + seed);
        Tensor2D x = random_input(64, 16, 2000 + seed);
        nq::attach_noise(l, 0.7 * l.a_params.ref_scale(), 50 + seed);
        const Tensor2D fl = nq::forward_noisyquant(l, x);
        const Tensor2D it = nq::forward_integer(l, x);
        const double bound = nq::integer_path_bound(l);
        for (size_t i = 0; i < fl.size(); ++i)
            CHECK(std::abs(fl.values()[i] - it.values()[i]) <= bound + 1e-6);
    }
}

TEST_CASE("integer path with n = 0 and representable bias matches forward_quant") {
    QuantLinearLayer l = random_layer(8, 8, 6, 6, 61);
    // make the bias exactly representable in every channel's accumulator grid
    const double a_scale = l.a_params.tensor_params().scale();
    for (size_t r = 0; r < l.bias.rows(); ++r)
        l.bias.at(r, 0) = static_cast<float>(3.0 * a_scale * l.w_params.scale_for(r));
    nq::attach_noise(l, 0.0, 1);
    Tensor2D x = random_input(8, 4, 62);
    const Tensor2D q = nq::forward_quant(l, x);
    const Tensor2D it = nq::forward_integer(l, x);
    for (size_t i = 0; i < q.size(); ++i)
        CHECK(it.values()[i] == doctest::Approx(q.values()[i]).epsilon(1e-6));
}

TEST_CASE("integer path rejects twin grids and wide bit-widths") {
    QuantLinearLayer l = random_layer(4, 4, 6, 6, 71);
    nq::attach_noise(l, 0.0, 1);
    l.a_params.grid = nq::TwinQuantParams{tensor_params(6, 0.1), tensor_params(6, 0.1), 0.0};
    CHECK_THROWS_AS(nq::forward_integer(l, Tensor2D(4, 2)), nq::ConfigError);
}

TEST_CASE("layer QE report basics") {
    // identity weight, zero bias: output QE equals input QE
    QuantLinearLayer l;
    const size_t m = 8;
    l.weight = Tensor2D(m, m);
    for (size_t i = 0; i < m; ++i) l.weight.at(i, i) = 1.0f;
    l.bias = Tensor2D(m, 1);
    l.w_params = nq::fit_weight_minmax(l.weight, 8);
    l.w_params.scales.assign(m, 1.0); // exact identity after quantization
    l.a_params.grid = tensor_params(6, 0.1);
    Tensor2D x = random_input(m, 16, 81, 1.0);
    nq::attach_noise(l, 0.05, 9);
    nq::QEReport rep = nq::layer_qe_report(l, x);
    CHECK(rep.output_qe == doctest::Approx(rep.input_qe).epsilon(1e-6));
    CHECK(rep.input_hist.total() == x.size());

    // n = 0: D = 0 and both output errors equal
    QuantLinearLayer z = random_layer(8, 8, 6, 6, 91);
    nq::attach_noise(z, 0.0, 1);
    nq::QEReport rz = nq::layer_qe_report(z, x);
    CHECK(rz.d == 0.0);
    CHECK(rz.output_qe == rz.output_qe_noisy);
    CHECK(rz.drop_pct == 0.0);
}

TEST_CASE("output QE equals ||W (Q(X) - X)||^2 on small layers") {
    for (uint64_t seed = 0; seed < 5; ++seed) {
        QuantLinearLayer l = random_layer(8, 8, 24, 6, 300 + seed);
        l.w_params = nq::fit_weight_minmax(l.weight, 24); // near-exact weights
        Tensor2D x = random_input(8, 8, 400 + seed);
        nq::QEReport rep = nq::layer_qe_report(l, x);
        // brute force: W (Q(X) - X), per-element mean of squares
        Tensor2D diff(8, 8);
        const Tensor2D qx = l.a_params.apply(x);
        for (size_t i = 0; i < x.size(); ++i)
            diff.values()[i] = qx.values()[i] - x.values()[i];
        const Tensor2D wd = nq::matmul(nq::quantize(l.weight, l.w_params), diff);
        double mse = 0.0;
        for (float v : wd.values()) mse += static_cast<double>(v) * v;
        mse /= static_cast<double>(wd.size());
        CHECK(rep.output_qe == doctest::Approx(mse).epsilon(1e-6));
    }
}
