/** Typed client for the forge audit HTTP API. */

export type AuditClass =
  | "high_quality"
  | "low_quality"
  | "multiple_persons"
  | "not_a_person";

export const AUDIT_CLASSES: AuditClass[] = [
  "high_quality",
  "low_quality",
  "multiple_persons",
  "not_a_person",
];

export const CLASS_LABELS: Record<AuditClass, string> = {
  high_quality: "High quality",
  low_quality: "Low quality",
  multiple_persons: "Multiple persons",
  not_a_person: "Not a person",
};

/** Payload of GET /api/sessions/{id}/next. */
export interface NextCrop {
  box_id: string;
  image_url: string;
  box: [number, number, number, number];
  remaining: number;
}

/** Payload of GET /api/sessions/{id}/report. */
export interface Report {
  counts: Record<AuditClass, number>;
  percentages: Record<AuditClass, number>;
  person_rate: number;
  n_labeled: number;
}

/** Non-2xx response, carrying the server's detail message. */
export class ApiError extends Error {
  constructor(
    public status: number,
    detail: string,
  ) {
    super(detail);
    this.name = "ApiError";
  }
}

async function raiseForStatus(res: Response): Promise<void> {
  if (res.ok) return;
  let detail = `HTTP ${res.status}`;
  try {
    const body = await res.json();
    if (typeof body.detail === "string") detail = body.detail;
  } catch {
    // non-JSON error body; keep the status line
  }
  throw new ApiError(res.status, detail);
}

export class AuditApi {
  constructor(private base = "") {}

  /** Create a session of n sampled boxes; returns its server-assigned id. */
  async createSession(n: number, seed = 0, dataset?: string): Promise<string> {
    const body: Record<string, unknown> = { n, seed };
    if (dataset !== undefined) body.dataset = dataset;
    const res = await fetch(`${this.base}/api/sessions`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
    await raiseForStatus(res);
    const payload = await res.json();
    return payload.session_id;
  }

  /** Next unlabeled crop, or null when the session is fully labeled. */
  async nextCrop(sessionId: string): Promise<NextCrop | null> {
    const res = await fetch(
      `${this.base}/api/sessions/${encodeURIComponent(sessionId)}/next`,
    );
    if (res.status === 204) return null;
    await raiseForStatus(res);
    return res.json();
  }

  /** Record one label; returns the session's remaining count. */
  async submitLabel(
    sessionId: string,
    boxId: string,
    cls: AuditClass,
  ): Promise<number> {
    const res = await fetch(
      `${this.base}/api/sessions/${encodeURIComponent(sessionId)}/labels`,
      {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify({ box_id: boxId, class: cls }),
      },
    );
    await raiseForStatus(res);
    const payload = await res.json();
    return payload.remaining;
  }

  /** Class counts and percentages so far; the server is the source of truth. */
  async report(sessionId: string): Promise<Report> {
    const res = await fetch(
      `${this.base}/api/sessions/${encodeURIComponent(sessionId)}/report`,
    );
    await raiseForStatus(res);
    return res.json();
  }

  /** URL of a crop PNG; box ids contain "#" so they must be encoded. */
  cropUrl(boxId: string, margin = 0): string {
    const suffix = margin > 0 ? `?margin=${margin}` : "";
    return `${this.base}/api/crops/${encodeURIComponent(boxId)}${suffix}`;
  }

  /**
   * Fetch a crop with context padding. The X-Box header carries the box's
   * [x, y, w, h] inside the returned image, for drawing the overlay.
   */
  async fetchCrop(
    boxId: string,
    margin: number,
  ): Promise<{ blobUrl: string; box: [number, number, number, number] | null }> {
    const res = await fetch(this.cropUrl(boxId, margin));
    await raiseForStatus(res);
    const header = res.headers.get("X-Box");
    const box = header ? JSON.parse(header) : null;
    const blobUrl = URL.createObjectURL(await res.blob());
    return { blobUrl, box };
  }
}
