/** Typed client for the session service wire protocol (see docs/api.md). */
import type { InstructionPayload } from "./instruction.js";

export interface SessionInfo {
  id: string;
  status: JobStatus;
  artifacts: string[];
}

export interface JobStatus {
  state: "idle" | "running" | "done" | "failed";
  step: string | null;
  reason: string | null;
}

export interface PreviewResult {
  coarse: string;
  target_mask: string;
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    detail: string,
  ) {
    super(`${code}: ${detail}`);
  }
}

async function raise(resp: Response): Promise<never> {
  let code = "http_error";
  let detail = resp.statusText;
  try {
    const body = await resp.json();
    code = body.error ?? code;
    detail = body.detail ?? detail;
  } catch {
    // non-JSON error body; keep the status text
  }
  throw new ApiError(resp.status, code, detail);
}

export class GeoEditClient {
  constructor(readonly base: string = "") {}

  private url(path: string): string {
    return `${this.base}${path}`;
  }

  async health(): Promise<boolean> {
    const resp = await fetch(this.url("/health"));
    return resp.ok;
  }

  async createSession(pngBytes: Uint8Array): Promise<{ id: string; width: number; height: number }> {
    const resp = await fetch(this.url("/sessions"), {
      method: "POST",
      headers: { "Content-Type": "image/png" },
      body: pngBytes as unknown as BodyInit,
    });
    if (!resp.ok) await raise(resp);
    return resp.json();
  }

  async sessionInfo(id: string): Promise<SessionInfo> {
    const resp = await fetch(this.url(`/sessions/${id}`));
    if (!resp.ok) await raise(resp);
    return resp.json();
  }

  async assistMask(id: string, points: Array<[number, number]>, tolerance: number): Promise<Uint8Array> {
    const resp = await fetch(this.url(`/sessions/${id}/mask/assist`), {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ points, tolerance }),
    });
    if (!resp.ok) await raise(resp);
    return new Uint8Array(await resp.arrayBuffer());
  }

  async setMask(id: string, role: "source" | "completion", pngBytes: Uint8Array): Promise<void> {
    const resp = await fetch(this.url(`/sessions/${id}/mask/${role}`), {
      method: "PUT",
      headers: { "Content-Type": "image/png" },
      body: pngBytes as unknown as BodyInit,
    });
    if (!resp.ok) await raise(resp);
  }

  async preview(id: string, instruction: InstructionPayload): Promise<PreviewResult> {
    const resp = await fetch(this.url(`/sessions/${id}/preview`), {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ instruction }),
    });
    if (!resp.ok) await raise(resp);
    return resp.json();
  }

  async run(
    id: string,
    step: "inpaint" | "refine" | "full",
    body: { prompt?: string; instruction?: InstructionPayload } = {},
  ): Promise<void> {
    const resp = await fetch(this.url(`/sessions/${id}/run/${step}`), {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
    if (!resp.ok) await raise(resp);
  }

  async status(id: string): Promise<JobStatus> {
    const resp = await fetch(this.url(`/sessions/${id}/status`));
    if (!resp.ok) await raise(resp);
    return resp.json();
  }

  async artifact(id: string, name: string): Promise<Uint8Array> {
    const resp = await fetch(this.url(`/sessions/${id}/artifacts/${name}`));
    if (!resp.ok) await raise(resp);
    return new Uint8Array(await resp.arrayBuffer());
  }

  async pollUntilDone(id: string, intervalMs = 500, timeoutMs = 300_000): Promise<JobStatus> {
    const deadline = Date.now() + timeoutMs;
    for (;;) {
      const status = await this.status(id);
      if (status.state === "done" || status.state === "failed") return status;
      if (Date.now() > deadline) throw new Error("timed out waiting for the job");
      await new Promise((resolve) => setTimeout(resolve, intervalMs));
    }
  }
}
