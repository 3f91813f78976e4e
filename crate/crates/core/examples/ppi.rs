use smom_core::estimators::{improved_estimator, score_matching_any, Anchor, ImprovementConfig};
use smom_core::models::ppi_model;
use smom_core::numerics::RngStream;
use smom_core::samplers::sample;
use smom_core::vector_fields::mlp_field;

fn main() -> smom_core::Result<()> {
    let model = ppi_model(&[-0.5; 3], 3)?;
    let mut rng = RngStream::new(7, 0);
    let data = sample(&model, model.reference_theta(), 100, &mut rng)?;
    let sm = score_matching_any(&model, &data)?;

    let fields: Vec<_> = (0..12).map(|_| mlp_field(model.domain(), &mut rng)).collect();
    let config = ImprovementConfig { anchor: Anchor::PlugIn, raw_fields: &fields, mc_size: 1000 };
    let improved = improved_estimator(&model, &data, &config, &mut rng)?;
    println!("{:?} -> {:?} (ARE {:?})", sm.theta, improved.theta, improved.diagnostics.are);
    Ok(())
}
