use super::RegionRole;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionRequest {
    pub len: u64,
    pub start: u64,
    pub end: u64,
    pub owner: u32,
    pub role: RegionRole,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AllocFailure {
    /// Index into the request slice.
    pub request: usize,
    pub cycle: u64,
    pub deficit: u64,
}

fn role_rank(r: RegionRole) -> u8 {
    match r {
        RegionRole::Tile => 0,
        RegionRole::Out => 1,
    }
}

/// Places time-bounded regions in one address space of `capacity` bytes.
/// Requests are visited by (start, owner, role); each takes the lowest offset
/// not overlapping any already placed region live at its start. Returns
/// offsets in request order.
pub fn first_fit(reqs: &[RegionRequest], capacity: u64) -> Result<Vec<u64>, AllocFailure> {
    let mut order: Vec<usize> = (0..reqs.len()).collect();
    order.sort_by_key(|&i| (reqs[i].start, reqs[i].owner, role_rank(reqs[i].role)));

    let mut offsets = vec![0u64; reqs.len()];
    let mut placed: Vec<usize> = Vec::new();
    for &i in &order {
        let r = reqs[i];
        placed.retain(|&p| reqs[p].end > r.start);
        let mut busy: Vec<(u64, u64)> = placed
            .iter()
            .map(|&p| (offsets[p], offsets[p] + reqs[p].len))
            .collect();
        busy.sort_unstable();

        let mut cursor = 0u64;
        let mut widest = 0u64;
        let mut found = None;
        for &(lo, hi) in &busy {
            if lo >= cursor {
                if lo - cursor >= r.len {
                    found = Some(cursor);
                    break;
                }
                widest = widest.max(lo - cursor);
            }
            cursor = cursor.max(hi);
        }
        if found.is_none() {
            let tail = capacity.saturating_sub(cursor);
            if tail >= r.len {
                found = Some(cursor);
            }
            widest = widest.max(tail);
        }
        match found {
            Some(off) => {
                offsets[i] = off;
                placed.push(i);
            }
            None => {
                return Err(AllocFailure {
                    request: i,
                    cycle: r.start,
                    deficit: r.len - widest,
                })
            }
        }
    }
    Ok(offsets)
}
