"""Check output-layer height gradients against central finite differences.

Last-layer heights cannot change upstream spikes, so the true loss is smooth
in them and finite differences are a valid oracle.
"""

from imsnn.oracle import fd_check_last_layer, random_check_case

for seed in range(5):
    net, raster, label = random_check_case("10-5-3", T=20, seed=seed)
    rep = fd_check_last_layer(net, raster, label, step=1e-6, seed=seed)
    print(f"seed {seed}: {len(rep.coords)} heights, max rel err {rep.max_rel_err:.2e}, ok={rep.ok}")

# a coarse step is dominated by truncation error and is reported as such
net, raster, label = random_check_case("10-5-3", T=20, seed=0)
rep = fd_check_last_layer(net, raster, label, step=1e-2, seed=0)
print(f"step 1e-2: max rel err {rep.max_rel_err:.2e}, truncation dominated={rep.truncation_dominated}")
