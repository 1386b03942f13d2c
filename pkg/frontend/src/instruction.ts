/** Transform draft state and its serialization to the server's instruction schema. */

export type Op = "move" | "resize" | "rotate2d" | "rotate3d";
export type Difficulty = "easy" | "medium" | "hard";

export const MOVE_DIRECTIONS = [
  "up", "down", "left", "right", "up_left", "up_right", "down_left", "down_right",
] as const;

export const DIRECTIONS: Record<Op, readonly string[]> = {
  move: MOVE_DIRECTIONS,
  resize: ["enlarge", "shrink"],
  rotate2d: ["cw", "ccw"],
  rotate3d: ["x", "y", "z"],
};

type Band = [number, number];
type BandTable = Record<Difficulty, Band>;

const MOVE_BANDS: BandTable = { easy: [0.05, 0.1], medium: [0.1, 0.2], hard: [0.2, 0.4] };
const ROTATE2D_BANDS: BandTable = { easy: [5, 10], medium: [10, 20], hard: [20, 40] };
const ROTATE3D_BANDS: BandTable = { easy: [5, 10], medium: [15, 20], hard: [25, 40] };
const ENLARGE_BANDS: BandTable = { easy: [1.1, 1.3], medium: [1.3, 1.5], hard: [1.5, 3.0] };
const SHRINK_BANDS: BandTable = { easy: [0.8, 0.9], medium: [0.6, 0.8], hard: [0.4, 0.6] };

export function magnitudeBand(op: Op, direction: string, difficulty: Difficulty): Band {
  if (op === "move") return MOVE_BANDS[difficulty];
  if (op === "rotate2d") return ROTATE2D_BANDS[difficulty];
  if (op === "rotate3d") return ROTATE3D_BANDS[difficulty];
  return direction === "enlarge" ? ENLARGE_BANDS[difficulty] : SHRINK_BANDS[difficulty];
}

export interface TransformDraft {
  op: Op;
  direction: string;
  magnitude: number;
  difficulty: Difficulty;
}

export interface InstructionPayload {
  op: Op;
  direction: string;
  magnitude: number;
  difficulty: Difficulty;
}

export function defaultDraft(): TransformDraft {
  return { op: "move", direction: "right", magnitude: 0.15, difficulty: "medium" };
}

/** Returns a human-readable problem, or null when the draft is a valid instruction. */
export function validateDraft(draft: TransformDraft): string | null {
  if (!DIRECTIONS[draft.op]) return `unknown operation ${draft.op}`;
  if (!DIRECTIONS[draft.op].includes(draft.direction)) {
    return `direction ${draft.direction} is not valid for ${draft.op}`;
  }
  const [lo, hi] = magnitudeBand(draft.op, draft.direction, draft.difficulty);
  if (!(draft.magnitude >= lo && draft.magnitude <= hi)) {
    return `magnitude ${draft.magnitude} outside the ${draft.difficulty} range [${lo}, ${hi}]`;
  }
  return null;
}

/** Clamp the draft magnitude into the band of its (op, direction, difficulty) cell. */
export function clampDraft(draft: TransformDraft): TransformDraft {
  const direction = DIRECTIONS[draft.op].includes(draft.direction)
    ? draft.direction
    : DIRECTIONS[draft.op][0];
  const [lo, hi] = magnitudeBand(draft.op, direction, draft.difficulty);
  const magnitude = Math.min(hi, Math.max(lo, draft.magnitude));
  return { ...draft, direction, magnitude };
}

/** The exact JSON body field the service expects under `instruction`. */
export function serializeDraft(draft: TransformDraft): InstructionPayload {
  const problem = validateDraft(draft);
  if (problem) throw new Error(problem);
  return {
    op: draft.op,
    direction: draft.direction,
    magnitude: draft.magnitude,
    difficulty: draft.difficulty,
  };
}
