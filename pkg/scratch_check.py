"""Scratch: end-to-end mechanics check (not part of the deliverable)."""
import numpy as np

from carrierpf.filters import FilterConfig, init_particles, rbpf_step, conventional_pf_step
from carrierpf.sim import ScenarioConfig, SatelliteDef, NoiseDef, generate_scenario, pseudorange_ls_fix

CONSTELLATION = [
    SatelliteDef(1, 30.0, 75.0),
    SatelliteDef(2, 120.0, 50.0),
    SatelliteDef(3, 200.0, 40.0),
    SatelliteDef(4, 310.0, 55.0),
    SatelliteDef(5, 80.0, 25.0),
    SatelliteDef(6, 170.0, 65.0),
    SatelliteDef(7, 250.0, 30.0),
    SatelliteDef(8, 350.0, 45.0),
]

def make(noise=True, nlos=(), blockages=(), epochs=120, speed=2.0, seed=0):
    return ScenarioConfig(
        duration_s=float(epochs),
        constellation=CONSTELLATION,
        trajectory={"kind": "circle", "center_enu": [0.0, 300.0, 1.0], "radius_m": 400.0,
                    "speed_mps": speed},
        noise=NoiseDef() if noise else NoiseDef(1e-12, 1e-12, 1e-12),
        nlos_events=list(nlos),
        blockage_windows=list(blockages),
        seed=seed,
    )

def run(cfg_s, kind, n=500, seed=0, **kw):
    eps, truth = generate_scenario(cfg_s)
    cfg = FilterConfig(num_particles=n, seed=seed, **kw)
    noise = cfg.noise_model(1.0)
    prior = pseudorange_ls_fix(eps[0], truth.base, truth.base)
    print("prior err:", np.linalg.norm(prior.as_array() - truth.positions[0]))
    pset = init_particles(cfg, prior, cfg.prior_sigma)
    step = rbpf_step if kind == "rbpf" else conventional_pf_step
    errs, verrs = [], []
    for ep in eps:
        pset, est = step(pset, ep, truth.base, noise, cfg)
        errs.append(np.linalg.norm(est.position - truth.positions[ep.epoch_index]))
        if est.velocity_available:
            verrs.append(np.linalg.norm(est.velocity - truth.velocities[ep.epoch_index]))
    errs = np.array(errs); verrs = np.array(verrs)
    print(f"{kind}: pos rmse after 10 = {np.sqrt(np.mean(errs[10:]**2)):.4f} m | "
          f"max {errs[10:].max():.3f} | vel rmse {np.sqrt(np.mean(verrs**2)):.4f} m/s | "
          f"frac<0.3m {np.mean(errs < 0.3):.3f}")
    return errs, verrs

print("== noiseless open sky ==")
run(make(noise=False), "rbpf")
run(make(noise=False), "conventional_pf")

print("== noisy open sky ==")
run(make(), "rbpf")
run(make(), "conventional_pf")

print("== NLOS on sats 2,5 epochs 30..90, doppler bias 1.0 ==")
from carrierpf.sim import NlosEvent
ev = [NlosEvent(2, 30, 90, 20.0, 0.25, 1.0), NlosEvent(5, 30, 90, 20.0, 0.25, 1.0)]
run(make(nlos=ev), "rbpf")
run(make(nlos=ev), "conventional_pf")

print("== blockage epochs 50..60, speed 0.5 ==")
run(make(blockages=[(50, 60)], speed=0.5), "rbpf")
run(make(blockages=[(50, 60)], speed=0.5), "conventional_pf")
