//! Connected-component labeling on dense 2D grids and sparse 3D voxel sets.

use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

/// Label foreground cells of a dense row-major grid. Returns one component
/// per entry, each a list of linear cell indices in ascending order.
/// Components are emitted in scan order of their first cell.
pub(crate) fn components_2d(
    width: usize,
    height: usize,
    fg: &[bool],
    conn: Connectivity,
) -> Vec<Vec<usize>> {
    debug_assert_eq!(fg.len(), width * height);
    let mut seen = vec![false; fg.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..fg.len() {
        if !fg[start] || seen[start] {
            continue;
        }
        let mut cells = Vec::new();
        seen[start] = true;
        stack.push(start);
        while let Some(idx) = stack.pop() {
            cells.push(idx);
            let x = (idx % width) as isize;
            let y = (idx / width) as isize;
            let neigh: &[(isize, isize)] = match conn {
                Connectivity::Four => &[(1, 0), (-1, 0), (0, 1), (0, -1)],
                Connectivity::Eight => &[
                    (1, 0),
                    (-1, 0),
                    (0, 1),
                    (0, -1),
                    (1, 1),
                    (1, -1),
                    (-1, 1),
                    (-1, -1),
                ],
            };
            for (dx, dy) in neigh {
                let nx = x + dx;
                let ny = y + dy;
                if nx < 0 || ny < 0 || nx >= width as isize || ny >= height as isize {
                    continue;
                }
                let n = ny as usize * width + nx as usize;
                if fg[n] && !seen[n] {
                    seen[n] = true;
                    stack.push(n);
                }
            }
        }
        cells.sort_unstable();
        out.push(cells);
    }
    out
}

/// Largest component of a dense mask (ties broken by scan order of the first
/// cell). Returns `None` for an all-background grid.
pub(crate) fn largest_component_2d(
    width: usize,
    height: usize,
    fg: &[bool],
    conn: Connectivity,
) -> Option<Vec<usize>> {
    components_2d(width, height, fg, conn)
        .into_iter()
        .max_by_key(|c| (c.len(), std::cmp::Reverse(c[0])))
}

/// Face-adjacent (6-connected) components of a sparse voxel key set.
/// Keys are `(iz, iy, ix)`. Components come out sorted by their first key.
pub(crate) fn components_3d_sparse<V>(
    cells: &BTreeMap<(usize, usize, usize), V>,
) -> Vec<Vec<(usize, usize, usize)>> {
    let mut seen: BTreeMap<(usize, usize, usize), bool> =
        cells.keys().map(|k| (*k, false)).collect();
    let mut out = Vec::new();
    let mut stack = Vec::new();
    let keys: Vec<_> = cells.keys().copied().collect();
    for start in keys {
        if seen[&start] {
            continue;
        }
        *seen.get_mut(&start).unwrap() = true;
        stack.push(start);
        let mut comp = Vec::new();
        while let Some((z, y, x)) = stack.pop() {
            comp.push((z, y, x));
            for (dz, dy, dx) in [
                (1i64, 0i64, 0i64),
                (-1, 0, 0),
                (0, 1, 0),
                (0, -1, 0),
                (0, 0, 1),
                (0, 0, -1),
            ] {
                let nz = z as i64 + dz;
                let ny = y as i64 + dy;
                let nx = x as i64 + dx;
                if nz < 0 || ny < 0 || nx < 0 {
                    continue;
                }
                let nk = (nz as usize, ny as usize, nx as usize);
                if let Some(s) = seen.get_mut(&nk) {
                    if !*s {
                        *s = true;
                        stack.push(nk);
                    }
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}
