// Thin client for the review service HTTP interface.

export interface PendingRecord {
  record_id: string;
  scan_id: string;
  round_index: number;
  summary: Record<string, unknown>;
  verdict: string | null;
}

export type Verdict = "accepted" | "rejected";

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ReviewClient {
  constructor(
    public baseUrl: string,
    private fetchImpl: FetchLike = (...args) => fetch(...args),
  ) {
    this.baseUrl = baseUrl.replace(/\/$/, "");
  }

  private async get(path: string): Promise<Response> {
    const res = await this.fetchImpl(this.baseUrl + path);
    if (!res.ok) throw new Error(`GET ${path} failed: ${res.status}`);
    return res;
  }

  async pending(roundIndex: number): Promise<PendingRecord[]> {
    return (await this.get(`/rounds/${roundIndex}/pending`)).json();
  }

  async mesh(recordId: string): Promise<ArrayBuffer> {
    return (await this.get(`/records/${encodeURIComponent(recordId)}/mesh`)).arrayBuffer();
  }

  async errors(recordId: string): Promise<(number | null)[]> {
    return (await this.get(`/records/${encodeURIComponent(recordId)}/errors`)).json();
  }

  async postVerdict(recordId: string, verdict: Verdict, author: string): Promise<void> {
    const res = await this.fetchImpl(
      `${this.baseUrl}/records/${encodeURIComponent(recordId)}/verdict`,
      {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify({ verdict, author }),
      },
    );
    if (!res.ok) throw new Error(`verdict rejected: ${res.status}`);
  }
}
