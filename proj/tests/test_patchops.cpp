#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "crfill/patchops.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

using namespace crfill;

namespace {

Tensor<double> iota_map(int c, int h, int w) {
  Tensor<double> t({1, c, h, w});
  std::iota(t.storage().begin(), t.storage().end(), 1.0);
  return t;
}

SimilarityMap<double> similarity_from(const PatchGeometry& g, const std::vector<std::vector<double>>& rows,
                                      KnownSet known) {
  const int p = g.count();
  Tensor<double> s({1, p, p});
  for (int i = 0; i < p; ++i) {
    for (int j = 0; j < p; ++j) s[static_cast<std::size_t>(i) * p + j] = rows[i][j];
  }
  return SimilarityMap<double>{g, Var<double>(s), {std::move(known)}};
}

std::vector<double> patch_row(const Tensor<double>& patches, int n, int i) {
  const int p = patches.dim(1), len = patches.dim(2);
  const double* row = patches.data() + (static_cast<std::size_t>(n) * p + i) * len;
  return {row, row + len};
}

}  // namespace

TEST_CASE("extract_patches on a 4x4 ramp with k=2, s=2") {
  auto grid = extract_patches(Var<double>(iota_map(1, 4, 4)), 2, 2);
  REQUIRE(grid.count() == 4);
  const std::vector<std::vector<double>> want{{1, 2, 5, 6}, {3, 4, 7, 8}, {9, 10, 13, 14}, {11, 12, 15, 16}};
  for (int i = 0; i < 4; ++i) CHECK(patch_row(grid.patches.value(), 0, i) == want[i]);
  CHECK(grid.geometry.center(0) == std::pair<double, double>{0.5, 0.5});
  CHECK(grid.geometry.center(3) == std::pair<double, double>{2.5, 2.5});
}

TEST_CASE("extract_patches of a constant map gives identical patches") {
  for (auto [k, s] : {std::pair{1, 1}, std::pair{3, 2}, std::pair{4, 3}}) {
    auto grid = extract_patches(Var<double>(Tensor<double>({1, 2, 9, 7}, 0.25)), k, s);
    for (int i = 1; i < grid.count(); ++i) CHECK(patch_row(grid.patches.value(), 0, i) == patch_row(grid.patches.value(), 0, 0));
  }
}

TEST_CASE("extract_patches matches direct slicing") {
  std::mt19937_64 rng(11);
  auto f = oracle::random_tensor<double>({2, 3, 8, 8}, rng);
  auto grid = extract_patches(Var<double>(f), 3, 1);
  REQUIRE(grid.count() == 36);
  CHECK(grid.count() == oracle::patch_count(8, 8, 3, 1));
  for (int n = 0; n < 2; ++n) {
    for (int i = 0; i < 36; ++i) CHECK(patch_row(grid.patches.value(), n, i) == oracle::slice_patch(f, n, i, 3, 1));
  }
  CHECK(extract_patches(Var<double>(f), 3, 2).count() == oracle::patch_count(8, 8, 3, 2));
  CHECK_THROWS_AS(extract_patches(Var<double>(f), 9, 1), DimensionError);
}

TEST_CASE("non-overlapping fold reproduces the source exactly") {
  std::mt19937_64 rng(12);
  auto f = oracle::random_tensor<double>({2, 3, 8, 12}, rng);
  auto grid = extract_patches(Var<double>(f), 4, 4);
  CHECK(fold_patches(grid.patches, grid.geometry).value() == f);
  // With overlap, folding unmodified patches still averages identical values.
  auto dense = extract_patches(Var<double>(f), 3, 1);
  auto back = fold_patches(dense.patches, dense.geometry).value();
  double worst = 0;
  for (std::size_t i = 0; i < f.size(); ++i) worst = std::max(worst, std::abs(back[i] - f[i]));
  CHECK(worst < 1e-12);
}

TEST_CASE("cosine similarity examples") {
  // Two 1x1 patches of a 2-channel 1x2 map: [1,0] and [0,1].
  Tensor<double> f({1, 2, 1, 2}, {1.0, 0.0, 0.0, 1.0});
  auto sim = cosine_similarity(extract_patches(Var<double>(f), 1, 1)).values.value();
  CHECK(std::abs(sim[1]) < 1e-12);
  CHECK(sim[0] == doctest::Approx(1.0).epsilon(1e-6));

  Tensor<double> g({1, 2, 1, 2}, {1.0, -1.0, 0.0, 0.0});
  auto anti = cosine_similarity(extract_patches(Var<double>(g), 1, 1)).values.value();
  CHECK(anti[1] == doctest::Approx(-1.0).epsilon(1e-6));

  Tensor<double> same({1, 1, 2, 4}, {1, 2, 1, 2, 3, 4, 3, 4});
  auto s = cosine_similarity(extract_patches(Var<double>(same), 2, 2)).values.value();
  CHECK(s[1] == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("cosine similarity matches the loop oracle and is symmetric in [-1, 1]") {
  std::mt19937_64 rng(13);
  auto f = oracle::random_tensor<double>({2, 3, 4, 6}, rng);
  auto grid = extract_patches(Var<double>(f), 2, 2);
  REQUIRE(grid.count() == 6);
  auto s = cosine_similarity(grid).values.value();
  for (int n = 0; n < 2; ++n) {
    const auto ref = oracle::cosine(f, n, 2, 2);
    for (int i = 0; i < 6; ++i) {
      for (int j = 0; j < 6; ++j) {
        const double v = s[(static_cast<std::size_t>(n) * 6 + i) * 6 + j];
        CHECK(std::abs(v - ref[i][j]) < 1e-6);
        CHECK(std::abs(v - s[(static_cast<std::size_t>(n) * 6 + j) * 6 + i]) < 1e-6);
        CHECK(v <= 1.0 + 1e-12);
        CHECK(v >= -1.0 - 1e-12);
      }
      CHECK(std::abs(s[(static_cast<std::size_t>(n) * 6 + i) * 6 + i] - 1.0) < 1e-6);
    }
  }
  // A zero patch has zero similarity to everything, itself included.
  Tensor<double> z({1, 1, 1, 2}, {0.0, 1.0});
  auto zs = cosine_similarity(extract_patches(Var<double>(z), 1, 1)).values.value();
  CHECK(zs[0] == 0.0);
  CHECK(zs[1] == 0.0);
}

TEST_CASE("known set membership") {
  Tensor<double> clear({1, 1, 8, 8});
  auto all = mask_to_known_set(clear, 3, 1, 1);
  CHECK(std::count(all.begin(), all.end(), 1) == 36);

  CHECK_THROWS_AS(mask_to_known_set(Tensor<double>({1, 1, 8, 8}, 1.0), 3, 1, 1), EmptyKnownSetError);
  auto batched = known_sets(Tensor<double>({2, 1, 8, 8}, 1.0), 3, 1, 1);
  CHECK_FALSE(has_known(batched[0]));

  Tensor<double> hole({1, 1, 16, 16});
  for (int y = 0; y < 8; ++y) {
    for (int x = 0; x < 8; ++x) hole.at(0, 0, y, x) = 1.0;
  }
  auto known = mask_to_known_set(hole, 2, 2, 1);
  REQUIRE(known.size() == 64u);
  CHECK(std::count(known.begin(), known.end(), 0) == 16);
  CHECK(known == oracle::known(hole, 0, 2, 2, 1));

  // At a coarser feature scale a cell is missing if any covered pixel is.
  Tensor<double> speck({1, 1, 16, 16});
  speck.at(0, 0, 5, 9) = 1.0;
  auto coarse = mask_to_known_set(speck, 1, 1, 4);
  CHECK(coarse == oracle::known(speck, 0, 1, 1, 4));
  CHECK(std::count(coarse.begin(), coarse.end(), 0) == 1);
  CHECK(coarse[1 * 4 + 2] == 0);
  std::mt19937_64 rng(14);
  auto random = oracle::random_mask<double>(3, 16, 16, 0.05, rng);
  auto sets = known_sets(random, 2, 1, 2);
  for (int n = 0; n < 3; ++n) CHECK(sets[n] == oracle::known(random, n, 2, 1, 2));
}

TEST_CASE("soft_replace examples") {
  // Three 1-channel 1x1 patches; patch 0 missing, patches 1 and 2 known.
  Tensor<double> f({1, 1, 1, 3}, {9.0, 2.0, 6.0});
  auto grid = extract_patches(Var<double>(f), 1, 1);

  auto tie = similarity_from(grid.geometry, {{1, 0.3, 0.3}, {0.3, 1, 0.5}, {0.3, 0.5, 1}}, {0, 1, 1});
  CHECK(soft_replace(grid, tie, 10.0).value()[0] == doctest::Approx(4.0).epsilon(1e-12));

  auto sharp = similarity_from(grid.geometry, {{1, 1, -1}, {1, 1, 0}, {-1, 0, 1}}, {0, 1, 1});
  const double w = 1.0 / (1.0 + std::exp(-20.0));
  auto out = soft_replace(grid, sharp, 10.0).value();
  CHECK(std::abs(out[0] - 2.0) < 1e-6);
  CHECK(out[0] == doctest::Approx(w * 2.0 + (1 - w) * 6.0).epsilon(1e-12));
  CHECK(std::abs((1 - w) - 2.06e-9) < 1e-11);

  // A known patch whose self-similarity dominates keeps its own feature.
  const double leak = 4.0 / (1.0 + std::exp(10.0));
  CHECK(out[1] == doctest::Approx(2.0 + leak).epsilon(1e-12));
  CHECK(out[2] == doctest::Approx(6.0 - leak).epsilon(1e-12));
  CHECK(leak < 2e-4);
}

TEST_CASE("soft_replace matches the oracle and its softmax rows sum to one") {
  std::mt19937_64 rng(15);
  for (int trial = 0; trial < 5; ++trial) {
    auto f = oracle::random_tensor<double>({2, 2, 6, 6}, rng);
    auto mask = oracle::random_mask<double>(2, 6, 6, 0.3, rng);
    mask.at(0, 0, 0, 0) = mask.at(1, 0, 0, 0) = 0.0;
    auto grid = extract_patches(Var<double>(f), 1, 1);
    auto sim = cosine_similarity(grid);
    sim.known = known_sets(mask, 1, 1, 1);
    auto out = soft_replace(grid, sim, 10.0).value();
    for (int n = 0; n < 2; ++n) {
      const auto ref = oracle::soft_replace(f, n, oracle::cosine(f, n, 1, 1), sim.known[n], 10.0, 1, 1);
      CHECK(oracle::max_abs_diff(out, n, ref) < 1e-9);
    }
    // Replacing a constant-one feature map shows the weights of every row sum to one.
    Tensor<double> ones({2, 1, 6, 6}, 1.0);
    auto one_grid = extract_patches(Var<double>(ones), 1, 1);
    auto summed = soft_replace(one_grid, sim, 10.0).value();
    for (double v : summed.values()) CHECK(std::abs(v - 1.0) < 1e-6);
  }
}

TEST_CASE("soft_replace is permutation-equivariant") {
  std::mt19937_64 rng(16);
  const int p = 7, len = 3;
  auto patches = oracle::random_tensor<double>({1, p, len}, rng);
  auto s = oracle::random_tensor<double>({1, p, p}, rng);
  KnownSet known{1, 0, 1, 1, 0, 1, 0};
  std::vector<int> perm{4, 2, 6, 0, 5, 1, 3};

  // A 1 x p strip with 1x1 patches of `len` channels keeps the replaced patches visible unchanged.
  auto run = [&](const Tensor<double>& pt, const Tensor<double>& st, const KnownSet& k) {
    PatchGeometry g = make_patch_geometry(len, 1, p, 1, 1);
    PatchGrid<double> grid{g, Var<double>(pt)};
    SimilarityMap<double> sim{g, Var<double>(st), {k}};
    return soft_replace(grid, sim, 10.0).value();
  };
  Tensor<double> pp({1, p, len}), sp({1, p, p});
  KnownSet kp(p);
  for (int i = 0; i < p; ++i) {
    for (int d = 0; d < len; ++d) pp[i * len + d] = patches[perm[i] * len + d];
    for (int j = 0; j < p; ++j) sp[i * p + j] = s[perm[i] * p + perm[j]];
    kp[i] = known[perm[i]];
  }
  auto base = run(patches, s, known);
  auto permuted = run(pp, sp, kp);
  for (int i = 0; i < p; ++i) {
    for (int d = 0; d < len; ++d) CHECK(std::abs(permuted.at(0, d, 0, i) - base.at(0, d, 0, perm[i])) < 1e-12);
  }
}

TEST_CASE("soft_replace gradients w.r.t. features and similarity match finite differences") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 5; ++trial) {
    auto f = Var<double>::parameter(oracle::random_tensor<double>({1, 2, 5, 5}, rng));
    auto mask = oracle::random_mask<double>(1, 5, 5, 0.3, rng);
    mask.at(0, 0, 4, 4) = 0.0;
    auto grid_shape = extract_patches(f, 2, 1);
    auto s = Var<double>::parameter(oracle::random_tensor<double>({1, grid_shape.count(), grid_shape.count()}, rng));
    auto probe = oracle::random_tensor<double>({1, 2, 5, 5}, rng);
    auto known = known_sets(mask, 2, 1, 1);
    if (!has_known(known[0])) known[0][0] = 1;
    auto fn = [&] {
      auto grid = extract_patches(f, 2, 1);
      SimilarityMap<double> sim{grid.geometry, s, known};
      return sum(mul_const(soft_replace(grid, sim, 10.0), probe));
    };
    CHECK(oracle::gradient_error(fn, {f, s}, 1e-5) < 1e-3);
  }
}

TEST_CASE("hard_replace picks the lowest index on ties and approaches soft_replace for large alpha") {
  const int p = 9;
  Tensor<double> f({1, 1, 1, p});
  for (int i = 0; i < p; ++i) f[i] = i;
  auto grid = extract_patches(Var<double>(f), 1, 1);
  std::vector<std::vector<double>> rows(p, std::vector<double>(p, 0.1));
  rows[0][3] = rows[0][7] = 0.9;
  KnownSet known(p, 1);
  known[0] = 0;
  auto sim = similarity_from(grid.geometry, rows, known);
  CHECK(hard_assignment(sim)[0][0] == 3);
  CHECK(hard_replace(grid, sim).value()[0] == 3.0);

  std::mt19937_64 rng(18);
  auto feats = oracle::random_tensor<double>({1, 2, 4, 4}, rng);
  auto g2 = extract_patches(Var<double>(feats), 1, 1);
  const int q = g2.count();
  std::vector<std::vector<double>> gapped(q, std::vector<double>(q));
  KnownSet k2(q, 0);
  for (int j = 0; j < q; j += 3) k2[j] = 1;
  std::uniform_real_distribution<double> u(-1.0, 0.5);
  for (int i = 0; i < q; ++i) {
    for (int j = 0; j < q; ++j) gapped[i][j] = u(rng);
    gapped[i][(3 * i) % q - ((3 * i) % q) % 3] = 0.9;  // a known column 0.4 above the rest
  }
  auto gs = similarity_from(g2.geometry, gapped, k2);
  auto soft = soft_replace(g2, gs, 100.0).value();
  auto hard = hard_replace(g2, gs).value();
  double worst = 0, magnitude = 0;
  for (std::size_t i = 0; i < soft.size(); ++i) {
    worst = std::max(worst, std::abs(soft[i] - hard[i]));
    magnitude = std::max(magnitude, std::abs(feats[i]));
  }
  const double bound = std::exp(-100.0 * 0.2) * magnitude * std::count(k2.begin(), k2.end(), 1);
  CHECK(worst < 1e-3);
  CHECK(worst <= bound);
  CHECK(hard == oracle::hard_replace(feats, 0, gapped, k2, 1, 1));
}

TEST_CASE("replacement requires a known patch") {
  Tensor<double> f({1, 1, 2, 2}, 1.0);
  auto grid = extract_patches(Var<double>(f), 1, 1);
  auto sim = cosine_similarity(grid);
  sim.known = {KnownSet(4, 0)};
  CHECK_THROWS_AS(soft_replace(grid, sim, 10.0), EmptyKnownSetError);
  CHECK_THROWS_AS(hard_replace(grid, sim), EmptyKnownSetError);
  sim.known[0][2] = 1;
  CHECK_THROWS_AS(soft_replace(grid, sim, 0.0), std::invalid_argument);
}

TEST_CASE("jigsaw_compose leaves known pixels untouched") {
  std::mt19937_64 rng(19);
  auto image = oracle::random_tensor<float>({2, 3, 16, 16}, rng);
  auto mask = oracle::random_mask<float>(2, 16, 16, 0.0, rng);
  for (int y = 4; y < 12; ++y) {
    for (int x = 6; x < 14; ++x) mask.at(0, 0, y, x) = mask.at(1, 0, y, x) = 1.0f;
  }
  const auto g = make_patch_geometry(1, 4, 4, 1, 1);
  auto s = oracle::random_tensor<double>({2, g.count(), g.count()}, rng);
  SimilarityMap<double> sim{g, Var<double>(s), known_sets(mask.cast<double>(), 1, 1, 4)};
  auto result = jigsaw_compose(image, mask, sim, 4);
  CHECK_FALSE(result.skipped[0]);
  bool changed = false;
  for (int n = 0; n < 2; ++n) {
    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < 16; ++y) {
        for (int x = 0; x < 16; ++x) {
          if (mask.at(n, 0, y, x) == 0.0f) {
            CHECK(result.image.at(n, c, y, x) == image.at(n, c, y, x));
          } else {
            changed = changed || result.image.at(n, c, y, x) != image.at(n, c, y, x);
          }
        }
      }
    }
  }
  CHECK(changed);

  auto clear = jigsaw_compose(image, Tensor<float>({2, 1, 16, 16}), sim, 4);
  CHECK(clear.image == image);

  SimilarityMap<double> empty{g, Var<double>(s), {KnownSet(g.count(), 0), sim.known[1]}};
  auto skipped = jigsaw_compose(image, mask, empty, 4);
  CHECK(skipped.skipped[0]);
  CHECK_FALSE(skipped.skipped[1]);
}

TEST_CASE("jigsaw_compose copies the pixels of the best known patch") {
  // 8x8 image of 4x4 tiles; the bottom-right tile is missing and most similar to the top-left one.
  Tensor<float> image({1, 1, 8, 8});
  for (int y = 0; y < 8; ++y) {
    for (int x = 0; x < 8; ++x) image.at(0, 0, y, x) = static_cast<float>(y * 8 + x);
  }
  Tensor<float> mask({1, 1, 8, 8});
  for (int y = 4; y < 8; ++y) {
    for (int x = 4; x < 8; ++x) mask.at(0, 0, y, x) = 1.0f;
  }
  const auto g = make_patch_geometry(1, 2, 2, 1, 1);
  auto sim = similarity_from(g, {{1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}, {0.9, 0.2, 0.3, 1}}, {1, 1, 1, 0});
  auto out = jigsaw_compose(image, mask, sim, 4).image;
  for (int y = 4; y < 8; ++y) {
    for (int x = 4; x < 8; ++x) CHECK(out.at(0, 0, y, x) == image.at(0, 0, y - 4, x - 4));
  }
}

TEST_CASE("contextual attention baseline") {
  // Four 3-channel cells pointing at the vertices of a tetrahedron: mutual cosine -1/3.
  Tensor<double> tetra({1, 3, 2, 2}, {1, 1, -1, -1, 1, -1, 1, -1, 1, -1, -1, 1});
  auto out = contextual_attention(Var<double>(tetra), Tensor<double>({1, 1, 2, 2}), 10.0, 1, 1).value();
  double worst = 0;
  for (std::size_t i = 0; i < out.size(); ++i) worst = std::max(worst, std::abs(out[i] - tetra[i]));
  CHECK(worst < 1e-5);

  // One known cell: every cell becomes it.
  std::mt19937_64 rng(20);
  auto f = oracle::random_tensor<double>({1, 2, 3, 3}, rng);
  Tensor<double> mask({1, 1, 3, 3}, 1.0);
  mask.at(0, 0, 1, 2) = 0.0;
  auto single = contextual_attention(Var<double>(f), mask, 10.0, 1, 1).value();
  for (int c = 0; c < 2; ++c) {
    for (int y = 0; y < 3; ++y) {
      for (int x = 0; x < 3; ++x) CHECK(single.at(0, c, y, x) == doctest::Approx(f.at(0, c, 1, 2)).epsilon(1e-12));
    }
  }

  // Same as composing the primitives by hand on a padded map.
  auto g = oracle::random_tensor<double>({1, 4, 6, 6}, rng);
  Tensor<double> m({1, 1, 12, 12});
  for (int y = 0; y < 6; ++y) {
    for (int x = 6; x < 12; ++x) m.at(0, 0, y, x) = 1.0;
  }
  auto ca = contextual_attention(Var<double>(g), m, 10.0, 3, 1).value();
  auto grid = extract_patches(pad_border(Var<double>(g), 1), 3, 1);
  auto sim = cosine_similarity(grid);
  sim.known = known_sets(pad_border(Var<double>(downsample_mask(m, 2)), 1).value(), 3, 1, 1);
  auto manual = crop(soft_replace(grid, sim, 10.0), 1, 1, 6, 6).value();
  CHECK(ca == manual);
  CHECK(contextual_attention_similarity(Var<double>(g), m, 3, 1).values.value() == sim.values.value());
}

TEST_CASE("similarity flop count is quadratic in the patch count") {
  CHECK(ca_similarity_flops(100, 3, 8) == 100ull * 100 * 9 * 8);
  CHECK(ca_similarity_flops(200, 3, 8) == 4 * ca_similarity_flops(100, 3, 8));
}
