//! Per-site group-size allocation under a BOP budget.
//!
//! Sensitivity of site `l` to group size `g` is the mean KL divergence
//! between predictions with `l` left in full precision and predictions with
//! `l` quantized at `g`, every other site quantized. Choosing one size per
//! site to minimize the summed sensitivity under the budget is a
//! multiple-choice knapsack, solved exactly over the Pareto front of
//! (cost, sensitivity) partial solutions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bops::{bop_igq_overhead, layer_table, model_bops};
use crate::error::{Error, Result};
use crate::igq::EmState;
use crate::tensor::Tensor;
use crate::vit::calibrate::{CalibratedModel, CalibrationConfig, SiteQuantizer, SiteStats};
use crate::vit::sites::{act_block, act_site_kind, act_site_name, SiteMode};

pub const DEFAULT_CANDIDATES: [usize; 6] = [4, 6, 8, 10, 12, 16];

/// Floor applied to `q` before taking logarithms.
pub const KL_Q_FLOOR: f64 = 1e-12;

/// `Σ p ln(p/q)` with `0·ln 0 = 0` and `q` clamped at [`KL_Q_FLOOR`].
pub fn kl_divergence(p: &[f32], q: &[f32]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape("kl_divergence", format!("{} vs {} classes", p.len(), q.len())));
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| {
            let pi = pi as f64;
            pi * (pi / (qi as f64).max(KL_Q_FLOOR)).ln()
        })
        .sum::<f64>()
        .max(0.0))
}

/// `psi[l][k]`: sensitivity of site `sites[l]` at group size `candidates[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationTable {
    pub sites: Vec<String>,
    pub candidates: Vec<usize>,
    pub psi: Vec<Vec<f64>>,
}

impl PerturbationTable {
    pub fn validate(&self) -> Result<()> {
        if self.candidates.is_empty() || self.candidates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("candidate group sizes must be non-empty and strictly increasing".into()));
        }
        if self.psi.len() != self.sites.len() || self.psi.iter().any(|r| r.len() != self.candidates.len()) {
            return Err(Error::shape("perturbation table", "psi is not sites × candidates"));
        }
        if self.psi.iter().flatten().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidConfig("perturbations must be non-negative".into()));
        }
        Ok(())
    }

    /// `Σ_l psi[l][choice[l]]`, summed in site order.
    pub fn total(&self, choice: &[usize]) -> f64 {
        self.psi.iter().zip(choice).map(|(row, &k)| row[k]).sum()
    }
}

/// Costs are additive: `B(choice) = base + Σ_l costs[l][choice[l]]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationProblem {
    pub costs: Vec<Vec<u64>>,
    pub base: u64,
    pub budget: u64,
}

impl AllocationProblem {
    pub fn cost(&self, choice: &[usize]) -> u64 {
        self.base + self.costs.iter().zip(choice).map(|(row, &k)| row[k]).sum::<u64>()
    }

    /// Cost of the cheapest choice at every layer.
    pub fn min_cost(&self) -> u64 {
        self.base + self.costs.iter().map(|r| r.iter().copied().min().unwrap_or(0)).sum::<u64>()
    }
}

#[derive(Debug, Clone)]
struct Partial {
    cost: u64,
    psi: f64,
    choice: Vec<usize>,
}

/// Exact minimizer of the summed perturbation within budget. Among equal
/// optima the lexicographically smallest candidate-index vector wins, which
/// prefers smaller sizes at lower site indices. Returns candidate indices.
pub fn allocate(table: &PerturbationTable, problem: &AllocationProblem) -> Result<Vec<usize>> {
    table.validate()?;
    let layers = table.sites.len();
    if problem.costs.len() != layers || problem.costs.iter().any(|r| r.len() != table.candidates.len()) {
        return Err(Error::shape("allocate", "costs are not sites × candidates"));
    }
    if problem.budget == 0 {
        return Err(Error::InvalidConfig("budget must be positive".into()));
    }
    let required = problem.min_cost();
    if required > problem.budget {
        return Err(Error::InfeasibleBudget {
            required,
            budget: problem.budget,
        });
    }
    let cap = problem.budget - problem.base;
    // cheapest completion from layer l onwards
    let mut min_suffix = vec![0u64; layers + 1];
    for l in (0..layers).rev() {
        min_suffix[l] = min_suffix[l + 1] + problem.costs[l].iter().copied().min().unwrap_or(0);
    }

    let mut front = vec![Partial {
        cost: 0,
        psi: 0.0,
        choice: Vec::new(),
    }];
    for l in 0..layers {
        let mut next = Vec::with_capacity(front.len() * table.candidates.len());
        for p in &front {
            for (k, (&c, &v)) in problem.costs[l].iter().zip(&table.psi[l]).enumerate() {
                let cost = p.cost + c;
                if cost + min_suffix[l + 1] > cap {
                    continue;
                }
                let mut choice = p.choice.clone();
                choice.push(k);
                next.push(Partial {
                    cost,
                    psi: p.psi + v,
                    choice,
                });
            }
        }
        next.sort_by(|a, b| {
            a.cost
                .cmp(&b.cost)
                .then(a.psi.total_cmp(&b.psi))
                .then_with(|| a.choice.cmp(&b.choice))
        });
        // keep a partial only if no cheaper-or-equal one is at least as good
        let mut kept: Vec<Partial> = Vec::new();
        for p in next {
            let dominated = kept.last().is_some_and(|best| {
                best.psi < p.psi || (best.psi == p.psi && best.choice <= p.choice)
            });
            if !dominated {
                kept.push(p);
            }
        }
        front = kept;
    }
    front
        .into_iter()
        .min_by(|a, b| a.psi.total_cmp(&b.psi).then_with(|| a.choice.cmp(&b.choice)))
        .map(|p| p.choice)
        .ok_or(Error::InfeasibleBudget {
            required,
            budget: problem.budget,
        })
}

/// Exhaustive search with the same objective and tie-break.
pub fn allocate_brute_force(table: &PerturbationTable, problem: &AllocationProblem) -> Result<Vec<usize>> {
    let layers = table.sites.len();
    let k = table.candidates.len();
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut choice = vec![0usize; layers];
    loop {
        if problem.cost(&choice) <= problem.budget {
            let v = table.total(&choice);
            // enumeration runs in lexicographic order, so strict improvement keeps the smallest
            if best.as_ref().is_none_or(|(bv, _)| v < *bv) {
                best = Some((v, choice.clone()));
            }
        }
        let mut l = layers;
        loop {
            if l == 0 {
                return best.map(|(_, c)| c).ok_or(Error::InfeasibleBudget {
                    required: problem.min_cost(),
                    budget: problem.budget,
                });
            }
            l -= 1;
            choice[l] += 1;
            if choice[l] < k {
                break;
            }
            choice[l] = 0;
        }
    }
}

/// Grouping overhead of every allocatable site at every candidate size, on
/// top of plain layer-wise matmul BOPs.
pub fn site_costs(
    cm: &CalibratedModel,
    sites: &[usize],
    candidates: &[usize],
    b_a: u32,
    b_w: u32,
) -> Result<AllocationProblem> {
    let spec = cm.spec();
    let base = model_bops(spec, None, b_a, b_w)?.total;
    let table = layer_table(spec);
    let costs = sites
        .iter()
        .map(|&s| {
            let name = act_site_name(spec, s);
            candidates
                .iter()
                .map(|&g| {
                    table
                        .iter()
                        .filter(|(_, _, site)| site.as_deref() == Some(name.as_str()))
                        .map(|(_, shape, _)| {
                            let o = bop_igq_overhead(*shape, g as u64, b_a);
                            o.minmax + o.assign + o.fp_sum
                        })
                        .sum()
                })
                .collect()
        })
        .collect();
    Ok(AllocationProblem {
        costs,
        base,
        budget: u64::MAX,
    })
}

/// `ψ` for one site and one replacement quantizer, by full forwards.
pub fn perturbation(cm: &CalibratedModel, site: usize, quantizer: &SiteQuantizer, samples: &[Tensor]) -> Result<f64> {
    let mut sum = 0.0;
    for x in samples {
        let p = cm.forward_with_site(x, site, &SiteQuantizer::Disabled)?;
        let q = cm.forward_with_site(x, site, quantizer)?;
        sum += kl_divergence(&p, &q)?;
    }
    Ok(sum / samples.len() as f64)
}

/// `ψ` for every `(site, candidate)`. Each sample's quantized forward is
/// recorded once and resumed from the block holding the site.
pub fn perturbation_table(
    cm: &CalibratedModel,
    sites: &[usize],
    candidates: &[usize],
    quantizer_for: &mut dyn FnMut(usize, usize) -> Result<SiteQuantizer>,
    samples: &[Tensor],
) -> Result<PerturbationTable> {
    if samples.is_empty() {
        return Err(Error::InvalidConfig("perturbation needs at least one sample".into()));
    }
    let spec = cm.spec();
    let quantizers: Vec<Vec<SiteQuantizer>> = sites
        .iter()
        .map(|&s| candidates.iter().map(|&g| quantizer_for(s, g)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let mut psi = vec![vec![0.0; candidates.len()]; sites.len()];
    for x in samples {
        let (_, inputs) = cm.forward_recording(x)?;
        for (li, &s) in sites.iter().enumerate() {
            let b = act_block(spec, s);
            let p = cm.forward_from(b, inputs[b].clone(), Some((s, &SiteQuantizer::Disabled)))?;
            for (k, q) in quantizers[li].iter().enumerate() {
                let y = cm.forward_from(b, inputs[b].clone(), Some((s, q)))?;
                psi[li][k] += kl_divergence(&p, &y)?;
            }
        }
    }
    let n = samples.len() as f64;
    psi.iter_mut().flatten().for_each(|v| *v /= n);
    Ok(PerturbationTable {
        sites: sites.iter().map(|&s| act_site_name(spec, s)).collect(),
        candidates: candidates.to_vec(),
        psi,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationConfig {
    pub candidates: Vec<usize>,
    pub n_iter: usize,
    /// Group sizes are re-solved whenever the iteration count is a multiple of this.
    pub period: usize,
    pub budget: u64,
    pub act_bits: u32,
    pub weight_bits: u32,
}

impl AllocationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.candidates.is_empty() || self.candidates.windows(2).any(|w| w[0] >= w[1]) || self.candidates[0] == 0
        {
            return Err(Error::InvalidConfig("candidates must be positive and strictly increasing".into()));
        }
        if self.n_iter == 0 || self.period == 0 {
            return Err(Error::InvalidConfig("n_iter and period must be at least 1".into()));
        }
        if self.budget == 0 {
            return Err(Error::InvalidConfig("budget must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationUpdate {
    pub iteration: usize,
    pub sizes: Vec<usize>,
    pub psi_sum: f64,
    pub bops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationOutcome {
    pub sizes: BTreeMap<String, usize>,
    pub updates: Vec<AllocationUpdate>,
    /// Table behind the last update, absent when no update ran.
    pub psi_table: Option<PerturbationTable>,
    pub bops: u64,
    pub budget: u64,
    /// Per-site EM objective traces, in site order.
    pub em_traces: BTreeMap<String, Vec<f64>>,
}

/// Interleaves EM steps at every instance-aware site with periodic
/// re-allocation of group sizes.
///
/// Each iteration advances every site's EM by one step. On iterations that
/// are multiples of `period` the sensitivity table is rebuilt and sizes
/// re-solved; a site whose size changes switches to a converged EM state for
/// its new size, a site whose size is kept continues from its current state.
pub fn allocation_loop(
    cm: &mut CalibratedModel,
    stats: &SiteStats,
    samples: &[Tensor],
    calib: &CalibrationConfig,
    cfg: &AllocationConfig,
) -> Result<AllocationOutcome> {
    cfg.validate()?;
    calib.validate()?;
    let spec = *cm.spec();
    let sites: Vec<usize> = cm
        .sites
        .igq_sites()
        .into_iter()
        .filter(|&s| act_site_kind(&spec, s).is_allocatable())
        .collect();
    if sites.is_empty() {
        return Err(Error::InvalidConfig("allocation needs an igq site on an FC input or attention".into()));
    }
    let mut problem = site_costs(cm, &sites, &cfg.candidates, cfg.act_bits, cfg.weight_bits)?;
    problem.budget = cfg.budget;
    let required = problem.min_cost();
    if required > cfg.budget {
        return Err(Error::InfeasibleBudget {
            required,
            budget: cfg.budget,
        });
    }

    let points: Vec<_> = sites.iter().map(|&s| stats.pooled(s)).collect();
    let bits: Vec<u8> = sites.iter().map(|&s| cm.sites.activations[s].bits).collect();
    let kinds: Vec<_> = sites.iter().map(|&s| act_site_kind(&spec, s).group_kind()).collect();
    for (&s, p) in sites.iter().zip(&points) {
        let units = stats.units(s);
        if let Some(&g) = cfg.candidates.iter().find(|&&g| g > units) {
            return Err(Error::InvalidConfig(format!(
                "{}: candidate size {g} exceeds {units} units",
                act_site_name(&spec, s)
            )));
        }
        debug_assert!(!p.is_empty());
    }

    // converged EM per (site, size), built on first use
    let mut cache: Vec<BTreeMap<usize, EmState>> = vec![BTreeMap::new(); sites.len()];
    let converged = |li: usize, g: usize, cache: &mut Vec<BTreeMap<usize, EmState>>| -> Result<EmState> {
        if let Some(st) = cache[li].get(&g) {
            return Ok(st.clone());
        }
        let mut st = EmState::new(&points[li], g, calib.site_seed(sites[li]), calib.tol)?;
        st.run(calib.max_iter);
        cache[li].insert(g, st.clone());
        Ok(st)
    };

    let mut sizes: Vec<usize> = sites
        .iter()
        .map(|&s| match cm.sites.activations[s].mode {
            SiteMode::Igq(g) => g,
            _ => unreachable!("igq_sites returns igq sites"),
        })
        .collect();
    let mut current: Vec<EmState> = sites
        .iter()
        .enumerate()
        .map(|(li, &s)| EmState::new(&points[li], sizes[li], calib.site_seed(s), calib.tol))
        .collect::<Result<_>>()?;
    let mut traces: Vec<Vec<f64>> = vec![Vec::new(); sites.len()];
    let mut updates = Vec::new();
    let mut last_table = None;

    let install = |cm: &mut CalibratedModel, current: &[EmState]| -> Result<()> {
        for (li, &s) in sites.iter().enumerate() {
            cm.activations[s] = SiteQuantizer::Grouped {
                quantizers: current[li].quantizers(kinds[li], bits[li])?,
                fixed: None,
            };
        }
        Ok(())
    };

    for k in 1..=cfg.n_iter {
        for (li, st) in current.iter_mut().enumerate() {
            let obj = st.step();
            traces[li].push(obj);
        }
        if k % cfg.period != 0 {
            continue;
        }
        install(cm, &current)?;
        let snapshot = cm.clone();
        let mut quantizer_for = |s: usize, g: usize| -> Result<SiteQuantizer> {
            let li = sites.iter().position(|&x| x == s).expect("listed site");
            let st = if g == sizes[li] {
                current[li].clone()
            } else {
                converged(li, g, &mut cache)?
            };
            Ok(SiteQuantizer::Grouped {
                quantizers: st.quantizers(kinds[li], bits[li])?,
                fixed: None,
            })
        };
        let table = perturbation_table(&snapshot, &sites, &cfg.candidates, &mut quantizer_for, samples)?;
        let choice = allocate(&table, &problem)?;
        for (li, &ci) in choice.iter().enumerate() {
            let g = cfg.candidates[ci];
            if g != sizes[li] {
                current[li] = converged(li, g, &mut cache)?;
                sizes[li] = g;
            }
        }
        updates.push(AllocationUpdate {
            iteration: k,
            sizes: sizes.clone(),
            psi_sum: table.total(&choice),
            bops: problem.cost(&choice),
        });
        last_table = Some(table);
    }
    install(cm, &current)?;
    for (li, &s) in sites.iter().enumerate() {
        cm.sites.activations[s].mode = SiteMode::Igq(sizes[li]);
    }

    let size_map: BTreeMap<String, usize> = sites
        .iter()
        .zip(&sizes)
        .map(|(&s, &g)| (act_site_name(&spec, s), g))
        .collect();
    let bops = problem.base
        + layer_table(&spec)
            .iter()
            .filter_map(|(_, shape, site)| {
                let g = size_map.get(site.as_ref()?)?;
                let o = bop_igq_overhead(*shape, *g as u64, cfg.act_bits);
                Some(o.minmax + o.assign + o.fp_sum)
            })
            .sum::<u64>();
    Ok(AllocationOutcome {
        sizes: size_map,
        updates,
        psi_table: last_table,
        bops,
        budget: cfg.budget,
        em_traces: sites
            .iter()
            .zip(traces)
            .map(|(&s, t)| (act_site_name(&spec, s), t))
            .collect(),
    })
}
