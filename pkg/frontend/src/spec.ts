/** Light-spec domain types and deterministic serialization.
 *
 * The server stores submitted specs verbatim, so byte-identical round trips
 * (UI -> server -> UI) only require that the UI serializes deterministically:
 * object keys are emitted in sorted order, with no insignificant whitespace.
 */

export type Vec3 = [number, number, number];

export interface LightProbe {
  kind: "point" | "environment";
  position?: Vec3;
  intensity: number;
  color?: Vec3;
  env_image?: string;
}

export interface LightSpec {
  lights: LightProbe[];
  roughness: number;
  depth_scale?: number;
}

export interface SceneBounds {
  width: number;
  height: number;
  maxDepth: number;
}

/** JSON.stringify with recursively sorted object keys. */
export function stableStringify(value: unknown): string {
  if (value === null || typeof value !== "object") {
    return JSON.stringify(value);
  }
  if (Array.isArray(value)) {
    return "[" + value.map(stableStringify).join(",") + "]";
  }
  const obj = value as Record<string, unknown>;
  const keys = Object.keys(obj)
    .filter((k) => obj[k] !== undefined)
    .sort();
  return "{" + keys.map((k) => JSON.stringify(k) + ":" + stableStringify(obj[k])).join(",") + "}";
}

export function serializeSpec(spec: LightSpec): string {
  return stableStringify(spec);
}

export function parseSpec(text: string): LightSpec {
  const raw = JSON.parse(text) as LightSpec;
  if (!Array.isArray(raw.lights)) {
    throw new Error("light spec must contain a lights array");
  }
  return raw;
}

/** Clamp a probe position into the scene volume; returns whether it moved. */
export function clampPosition(pos: Vec3, bounds: SceneBounds): { pos: Vec3; clamped: boolean } {
  const clampedPos: Vec3 = [
    Math.min(Math.max(pos[0], 0), bounds.width),
    Math.min(Math.max(pos[1], 0), bounds.height),
    Math.min(Math.max(pos[2], 0), bounds.maxDepth),
  ];
  const clamped = clampedPos.some((v, i) => v !== pos[i]);
  return { pos: clampedPos, clamped };
}
