//! Shared inputs for the criterion benchmarks: a representative program
//! and its instrumented form, built once.

use ccfi_core::ir::{parse_module, typecheck, Module};
use ccfi_core::pass::{instrument_module, PassConfig};

pub const HOT_LOOP: &str = "
global handler: fn(int64->int64) = @step_fn

fn step_fn(x: int64) -> int64 {
  y = add x, 3
  ret y
}

fn main() -> int64 {
  i = const 0
  acc = const 0
loop:
  c = lt i, 200
  br c, body, done
body:
  f = load.fn(int64->int64) &handler
  acc = icall f(acc)
  i = add i, 1
  jmp loop
done:
  print acc
  ret 0
}
";

pub fn hot_loop_module() -> Module {
    let m = parse_module(HOT_LOOP).expect("benchmark module parses");
    assert!(typecheck(&m).is_empty());
    m
}

pub fn hot_loop_instrumented() -> Module {
    instrument_module(
        &hot_loop_module(),
        &PassConfig {
            entropy_bits: 0,
            ..PassConfig::default()
        },
    )
}
