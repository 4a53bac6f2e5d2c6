//! Compare the tape gradients of the full training loss (BCE + TCL) with
//! central finite differences on a tiny model.
//!
//! ```text
//! cargo run --release --example grad_check
//! ```

use lcr_ser::data::{Catalog, Instance, RecEvent, SearchEvent, Window};
use lcr_ser::model::{Model, ModelConfig};
use lcr_ser::nn::{finite_diff_grad_check, GradCheckOptions, ParamStore, Tape, Var};
use lcr_ser::objectives::{instance_loss, TrainHyperparams};

fn main() -> lcr_ser::Result<()> {
    let mut cfg = ModelConfig::new(
        Catalog {
            users: 2,
            items: 12,
            words: 6,
        },
        Window {
            max_search: 3,
            max_rec: 3,
        },
        8,
    );
    cfg.init_std = 0.3;
    let Model { config, mut store, .. } = Model::new(cfg, 1)?;
    let inst = Instance {
        user: 0,
        search: (0..3)
            .map(|i| SearchEvent {
                timestamp: i,
                query: vec![1 + i as u32],
                clicked: vec![5 + i as u32],
            })
            .collect(),
        rec: (0..3).map(|i| RecEvent { timestamp: i, item: 8 + i as u32 }).collect(),
        target: 2,
        timestamp: 10,
        label: 1.0,
    };
    let hp = TrainHyperparams {
        lambda_tcl: 0.5,
        ..TrainHyperparams::default()
    };
    let loss = |tape: &mut Tape, s: &ParamStore| -> lcr_ser::Result<Var> {
        let m = Model::from_store(config.clone(), s.clone())?;
        Ok(instance_loss(tape, &m, &inst, &[0, 11], &hp)?.objective)
    };
    let report = finite_diff_grad_check(loss, &mut store, GradCheckOptions::default())?;
    println!(
        "probed {} entries, max relative error {:.2e} ({}[{}])",
        report.probed, report.max_relative_error, report.worst_param, report.worst_index
    );
    Ok(())
}
