/** DOM-free session orchestration: everything the UI does, minus rendering.
 *
 * The browser shell binds events to these methods; the automated flow test
 * drives them directly against a live server.
 */
import { GeoEditClient, JobStatus, PreviewResult } from "./api.js";
import { InstructionPayload, TransformDraft, defaultDraft, serializeDraft, validateDraft } from "./instruction.js";
import { MaskLayer } from "./mask-layer.js";

export type MaskRole = "source" | "completion";

export interface ControllerEvents {
  onStatus?: (text: string) => void;
  onPreview?: (result: PreviewResult) => void;
  onJob?: (status: JobStatus) => void;
}

export class SessionController {
  readonly client: GeoEditClient;
  private events: ControllerEvents;

  sessionId: string | null = null;
  width = 0;
  height = 0;
  layers: Record<MaskRole, MaskLayer> | null = null;
  activeRole: MaskRole = "source";
  brushRadius = 4;
  eraser = false;
  draft: TransformDraft = defaultDraft();
  prompt = "";
  lastPreview: PreviewResult | null = null;
  /** roles whose uploaded copy is stale relative to the local layer */
  private dirty: Set<MaskRole> = new Set();

  constructor(client: GeoEditClient, events: ControllerEvents = {}) {
    this.client = client;
    this.events = events;
  }

  private note(text: string): void {
    this.events.onStatus?.(text);
  }

  async open(imagePng: Uint8Array): Promise<string> {
    const created = await this.client.createSession(imagePng);
    this.sessionId = created.id;
    this.width = created.width;
    this.height = created.height;
    this.layers = {
      source: new MaskLayer(created.width, created.height),
      completion: new MaskLayer(created.width, created.height),
    };
    this.lastPreview = null;
    this.dirty.clear();
    this.note(`session ${created.id} (${created.width}x${created.height})`);
    return created.id;
  }

  private requireSession(): string {
    if (!this.sessionId || !this.layers) throw new Error("no open session");
    return this.sessionId;
  }

  activeLayer(): MaskLayer {
    this.requireSession();
    return this.layers![this.activeRole];
  }

  stroke(x0: number, y0: number, x1: number, y1: number): void {
    this.activeLayer().strokeLine(x0, y0, x1, y1, this.brushRadius, this.eraser);
    this.dirty.add(this.activeRole);
  }

  dab(x: number, y: number): void {
    this.activeLayer().paint(x, y, this.brushRadius, this.eraser);
    this.dirty.add(this.activeRole);
  }

  clearActive(): void {
    this.activeLayer().clear();
    this.dirty.add(this.activeRole);
  }

  /** Click-to-assist: grow a region on the server and merge it into the active layer. */
  async assistClick(x: number, y: number, tolerance = 0.15): Promise<void> {
    const id = this.requireSession();
    const png = await this.client.assistMask(id, [[x, y]], tolerance);
    const grown = MaskLayer.fromPng(png);
    this.activeLayer().mergeFrom(grown.data);
    this.dirty.add(this.activeRole);
    this.note("assist region merged");
  }

  /** Upload the active layer (or a given role) as the session mask. */
  async uploadMask(role: MaskRole = this.activeRole): Promise<void> {
    const id = this.requireSession();
    await this.client.setMask(id, role, this.layers![role].toPng());
    this.dirty.delete(role);
    this.note(`${role} mask uploaded`);
  }

  async syncMasks(): Promise<void> {
    for (const role of [...this.dirty]) {
      if (!this.layers![role].isEmpty()) await this.uploadMask(role);
    }
  }

  draftProblem(): string | null {
    return validateDraft(this.draft);
  }

  serializedInstruction(): InstructionPayload {
    return serializeDraft(this.draft);
  }

  async preview(): Promise<PreviewResult> {
    const id = this.requireSession();
    await this.syncMasks();
    const result = await this.client.preview(id, this.serializedInstruction());
    this.lastPreview = result;
    this.events.onPreview?.(result);
    return result;
  }

  async runStep(step: "inpaint" | "refine" | "full"): Promise<JobStatus> {
    const id = this.requireSession();
    await this.syncMasks();
    const body: { prompt?: string; instruction?: InstructionPayload } = {};
    if (this.prompt) body.prompt = this.prompt;
    if (step === "full") body.instruction = this.serializedInstruction();
    await this.client.run(id, step, body);
    this.note(`${step} running`);
    const status = await this.client.pollUntilDone(id, 400);
    this.events.onJob?.(status);
    this.note(status.state === "done" ? `${step} done` : `${step} failed: ${status.reason}`);
    return status;
  }

  async artifact(name: string): Promise<Uint8Array> {
    return this.client.artifact(this.requireSession(), name);
  }

  async artifactNames(): Promise<string[]> {
    const info = await this.client.sessionInfo(this.requireSession());
    return info.artifacts;
  }

  /** Download every artifact for export; returns name -> bytes. */
  async exportArtifacts(): Promise<Map<string, Uint8Array>> {
    const out = new Map<string, Uint8Array>();
    for (const name of await this.artifactNames()) {
      out.set(name, await this.artifact(name));
    }
    return out;
  }

  /** Import a previously exported mask file into a layer. */
  importMask(role: MaskRole, pngBytes: Uint8Array): void {
    this.requireSession();
    const layer = MaskLayer.fromPng(pngBytes);
    if (layer.width !== this.width || layer.height !== this.height) {
      throw new Error("imported mask dimensions do not match the session image");
    }
    this.layers![role] = layer;
    this.dirty.add(role);
  }
}
