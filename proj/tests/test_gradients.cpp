#include <doctest.h>

#include "gradcheck.hpp"

using namespace spectra;

TEST_CASE("full network gradients match finite differences") {
  const gradcheck::Report r = gradcheck::full_network(gradcheck::small_config(), 1);
  INFO("worst element: " << r.worst_param);
  CHECK(r.worst <= 1e-4);
}

TEST_CASE("gradients with the residual shortcut active") {
  SpectraConfig cfg = gradcheck::small_config();
  cfg.D = 5;  // n_fft 8 gives 5 bins
  REQUIRE(cfg.residual());
  const gradcheck::Report r = gradcheck::full_network(cfg, 2);
  INFO("worst element: " << r.worst_param);
  CHECK(r.worst <= 1e-4);
}

TEST_CASE("gradients of the ablated networks") {
  for (bool attn : {true, false})
    for (bool gru : {true, false}) {
      SpectraConfig cfg = gradcheck::small_config();
      cfg.use_channel_attention = attn;
      cfg.use_gru = gru;
      const gradcheck::Report r = gradcheck::full_network(cfg, 3);
      INFO("attn=" << attn << " gru=" << gru << " worst element: " << r.worst_param);
      CHECK(r.worst <= 1e-4);
    }
}
