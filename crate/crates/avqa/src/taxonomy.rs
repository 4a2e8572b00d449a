//! Fixed label vocabularies for the endoscopic pituitary workflow.
//!
//! All labels are lowercase token phrases.  The three class families are
//! surgical phases, surgical steps, and instruments; each family carries a
//! dedicated "end of ..." tail class used when nothing of that kind follows
//! the current timestamp.

/// Surgical phases in chronological order, followed by the tail class.
pub const PHASES: [&str; 4] = ["nasal sphenoid", "sellar", "closure", "end of phase"];

/// Surgical steps, followed by the tail class.
pub const STEPS: [&str; 15] = [
    "nasal corridor creation",
    "anterior sphenoidotomy",
    "septum displacement",
    "sphenoid sinus clearance",
    "sellotomy",
    "haemostasis",
    "synthetic graft placement",
    "durotomy",
    "tumour excision",
    "fat graft placement",
    "gasket seal construct",
    "dural sealant",
    "nasal packing",
    "debris clearance",
    "end of step",
];

/// Instrument vocabulary.
pub const INSTRUMENTS: [&str; 18] = [
    "suction",
    "freer elevator",
    "pituitary rongeurs",
    "spatula dissector",
    "kerrisons",
    "cottle",
    "haemostatic foam",
    "micro doppler",
    "nasal cutting forceps",
    "stealth pointer",
    "irrigation syringe",
    "retractable knife",
    "dural scissors",
    "ring curette",
    "cup forceps",
    "bipolar forceps",
    "tissue glue",
    "surgical drill",
];

/// Index of the tail class inside [`PHASES`].
pub const PHASE_TAIL: usize = 3;
/// Index of the tail class inside [`STEPS`].
pub const STEP_TAIL: usize = 14;

/// Non-tail phases in the order they occur in every procedure.
pub const PHASE_ORDER: [usize; 3] = [0, 1, 2];

/// Steps belonging to each non-tail phase (indices into [`STEPS`]).
///
/// The sellar list is the repertoire for that phase; the synthetic schedule
/// interleaves haemostasis with tumour excision rather than visiting each
/// step exactly once.
pub fn phase_steps(phase: usize) -> &'static [usize] {
    match phase {
        0 => &[0, 1, 2, 3],
        1 => &[4, 7, 5, 8, 6, 9, 10, 11],
        2 => &[12, 13],
        _ => &[],
    }
}

/// Instruments used by each step (indices into [`INSTRUMENTS`]).
///
/// The map is total over the fourteen real steps and covers all eighteen
/// instruments.  The tail step has no instruments.
pub fn step_instruments(step: usize) -> &'static [usize] {
    match step {
        0 => &[1, 5],       // nasal corridor creation: freer elevator, cottle
        1 => &[4, 17],      // anterior sphenoidotomy: kerrisons, surgical drill
        2 => &[1, 3],       // septum displacement: freer elevator, spatula dissector
        3 => &[0, 2],       // sphenoid sinus clearance: suction, pituitary rongeurs
        4 => &[17, 4],      // sellotomy: surgical drill, kerrisons
        5 => &[6, 15, 0],   // haemostasis: haemostatic foam, bipolar forceps, suction
        6 => &[3, 16],      // synthetic graft placement: spatula dissector, tissue glue
        7 => &[11, 12],     // durotomy: retractable knife, dural scissors
        8 => &[13, 14, 0],  // tumour excision: ring curette, cup forceps, suction
        9 => &[14, 16],     // fat graft placement: cup forceps, tissue glue
        10 => &[7, 9],      // gasket seal construct: micro doppler, stealth pointer
        11 => &[10, 16],    // dural sealant: irrigation syringe, tissue glue
        12 => &[8, 6],      // nasal packing: nasal cutting forceps, haemostatic foam
        13 => &[0, 10],     // debris clearance: suction, irrigation syringe
        _ => &[],
    }
}

/// Renders an instrument set as a comma-joined phrase in vocabulary order.
pub fn render_instruments(indices: &[usize]) -> String {
    let mut sorted: Vec<usize> = indices.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    sorted
        .iter()
        .map(|&i| INSTRUMENTS[i])
        .collect::<Vec<_>>()
        .join(", ")
}
