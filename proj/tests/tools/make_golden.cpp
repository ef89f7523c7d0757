// Writes the version-1 golden model used by the serialization tests.
//
//   make_golden OUT.tpnt

#include <cstdio>

#include "tpnt/net.hpp"
#include "tpnt/serialize.hpp"

using namespace tpnt;

int main(int argc, char** argv) {
  if (argc != 2) {
    std::fprintf(stderr, "usage: make_golden OUT.tpnt\n");
    return 1;
  }
  Rng rng(20240601, 0);
  TransplantNet net;
  NetModule f = make_category_module("ellipse", 1, 4, rng);
  f.frozen = true;
  NetModule g = make_classifier_head("classification", 4, 3, rng);
  g.layers.insert(g.layers.begin() + 3, DropoutLayer{0.25f});
  g.frozen = true;
  NetModule s = make_segmenter_head("segmentation", 4, 3, rng);
  s.frozen = true;
  net.add_category(f);
  net.add_task(g);
  net.add_task(s);
  net.connect("ellipse", "classification", direct_adapter(adapter_id("ellipse", "classification")));
  AdapterSpec spec;
  spec.channels = 4;
  spec.reorder_seed = 17;
  spec.beta = 0.5f;
  NetModule h = build_adapter(adapter_id("ellipse", "segmentation"), spec, rng);
  std::get<ReluLayer>(h.layers.back()).pseudo_mode = PseudoMode::Second;
  net.connect("ellipse", "segmentation", h);
  save_net(net, argv[1]);
  std::printf("%016llx\n", static_cast<unsigned long long>(net_hash(net)));
  return 0;
}
