#[test]
#[ignore]
fn match_check() {
    use rdcl::context::{context_param_count, matched_width, ContextKind};
    let target = context_param_count(ContextKind::Scctx, 80, 32, 8).unwrap();
    let cw = matched_width(ContextKind::Charm, 80, 32, target).unwrap();
    println!("scctx w8 target: {target}");
    println!("charm matched w{cw}: {}", context_param_count(ContextKind::Charm, 80, 32, cw).unwrap());
    let kw = matched_width(ContextKind::Checkerboard, 80, 32, target).unwrap();
    println!("checkerboard matched w{kw}: {}", context_param_count(ContextKind::Checkerboard, 80, 32, kw).unwrap());
}
