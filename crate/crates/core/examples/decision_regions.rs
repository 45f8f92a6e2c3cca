//! Decision regions of two weighted l1 templates: a heavily weighted
//! template owns a bounded diamond. Prints a coarse ASCII map and writes
//! the CSV raster when given a path.

use simnet::verify::two_template_raster;

fn main() -> simnet::Result<()> {
    for heavy in [1.0, 3.0] {
        let raster = two_template_raster(heavy, (41, 21))?;
        println!("weight {heavy}: region 0 bounded = {}", !raster.touches_boundary(0));
        for j in (0..raster.ys.len()).rev().step_by(2) {
            let row: String = (0..raster.xs.len()).map(|i| if raster.label_at(i, j) == 0 { '#' } else { '.' }).collect();
            println!("  {row}");
        }
    }
    if let Some(path) = std::env::args().nth(1) {
        simnet::pipeline::cmd_raster(3.0, (201, 201), &path)?;
        println!("wrote {path}");
    }
    Ok(())
}
