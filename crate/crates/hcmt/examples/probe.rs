use hcmt::model::{gradcheck_configured, ModelConfig, Variant, BranchParams};

fn main() {
    let base = ModelConfig { hidden: 8, heads: 2, l_c: 1, l_h: 3, lambda: 1, ..Default::default() };
    let cases: Vec<(&str, ModelConfig)> = vec![
        ("full shared", base.clone()),
        ("full separate", ModelConfig { branch_params: BranchParams::Separate, ..base.clone() }),
        ("full single_branch", ModelConfig { single_branch: true, ..base.clone() }),
        ("only_cmt shared", ModelConfig { variant: Variant::OnlyCmt, l_h: 0, ..base.clone() }),
        ("only_hmt", ModelConfig { variant: Variant::OnlyHmt, l_c: 0, ..base.clone() }),
    ];
    for (name, cfg) in cases {
        match gradcheck_configured(cfg, 0) {
            Ok(r) => println!("{name:22} max_rel_err {:.3e} at {}", r.max_rel_err, r.worst_param),
            Err(e) => println!("{name:22} ERROR {e}"),
        }
    }
}
