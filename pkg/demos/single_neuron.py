"""One LIF neuron fed a 10-step periodic input through three synapses.

A Gaussian synapse centred on the input ISI reproduces the conventional
synapse exactly; moving the centre away attenuates every spike's inflow.
"""

from imsnn.oracle import demo_single_neuron

res = demo_single_neuron()
for name, raster in res.rasters.items():
    line = "".join("|" if s else "." for s in raster)
    print(f"{name:>14}  {res.counts[name]} spikes  {line}")
for name, inflow in res.inflow_per_spike.items():
    print(f"inflow per input spike, {name}: {inflow:.6f}")
