/** Typed client for the retrieval service's JSON contract. */

export interface Hit {
  entry_id: string
  distance: number
  label: string
  magnification: string
  center: string
  thumbnail_url: string | null
}

export interface QueryResponse {
  hits: Hit[]
  elapsed_seconds: number
  grouped_by_magnification: boolean
  k: number
  scenario: string
  true_label: string | null
}

export interface IndexStats {
  entries: number
  per_label: Record<string, number>
  per_magnification: Record<string, number>
  layout_id: string
}

export interface QueryFormData {
  image: File | Blob
  k: number
  scenario: 'sen1' | 'sen2'
  magnification: string
  trueLabel: string
}

export class ServiceError extends Error {
  constructor(readonly status: number, message: string) {
    super(message)
  }
}

async function errorMessage(response: Response): Promise<string> {
  try {
    const payload = await response.json()
    if (payload && typeof payload.error === 'string') return payload.error
  } catch {
    /* non-JSON error body */
  }
  return `service responded with HTTP ${response.status}`
}

export async function postQuery(base: string, form: QueryFormData): Promise<QueryResponse> {
  const body = new FormData()
  body.append('image', form.image, 'query.png')
  body.append('k', String(form.k))
  body.append('scenario', form.scenario)
  if (form.magnification) body.append('magnification', form.magnification)
  if (form.trueLabel) body.append('true_label', form.trueLabel)
  const response = await fetch(`${base}/query`, { method: 'POST', body })
  if (!response.ok) throw new ServiceError(response.status, await errorMessage(response))
  return (await response.json()) as QueryResponse
}

export async function fetchStats(base: string): Promise<IndexStats> {
  const response = await fetch(`${base}/index/stats`)
  if (!response.ok) throw new ServiceError(response.status, await errorMessage(response))
  return (await response.json()) as IndexStats
}
